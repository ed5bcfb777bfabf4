//! Detector boundary.
//!
//! Two kinds of detector sit behind [`DetectorHandle`]:
//!
//! * **External**: any program honoring the file protocol
//!   `<cmd> train --data <dataset.json> --out <dir>` and
//!   `<cmd> infer --data <dataset.json> --out <detections.jsonl>`, exiting 0
//!   on success. Dataset files never include hidden truth.
//! * **Synthetic**: a seeded noisy oracle over each image's hidden truth.
//!   Training only records how many labels of each category it saw; recall
//!   then grows with the log of that count.
//!
//! Synthetic randomness comes from two kinds of ChaCha8 substream, each
//! seeded by a SHA-256 digest. A lesion stream keyed by `(seed, image_id,
//! lesion index)` fixes whether a lesion is detectable at a given recall, how
//! its box is displaced and its score, so a better-trained model finds a
//! superset of the lesions a weaker one found. A round stream keyed by
//! `(seed, artifact_tag, image_id)` draws false positives afresh for each
//! trained state. Per-image streams make parallel inference
//! bit-identical to serial.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotations::{save_dataset, Annotation, CategoryId, DatasetSnapshot, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{cf_match, BBox, CfParams};
use crate::par;
use crate::selection::{parse_detections, Detection};

/// Mean lesion-to-image area ratios for categories 1-4.
pub const MEAN_AREA_RATIOS: [f64; 4] = [0.0007244, 0.0005390, 0.0031672, 0.0023976];

const MIN_SCORE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaShape {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticModel {
    pub seed: u64,
    pub recall_base: f64,
    /// Recall gained per unit of `ln(1 + n)`.
    pub recall_gain: f64,
    pub tp_score_shape: BetaShape,
    /// Expected false positives per image.
    pub fp_rate: f64,
    pub fp_score_shape: BetaShape,
    /// Std of the center displacement in pixels; the log-size noise has
    /// std `localization_jitter / side`.
    pub localization_jitter: f64,
    /// Each training label that matches no hidden lesion cancels this many
    /// correct labels of its category when computing recall. Zero treats all
    /// labels alike.
    pub false_label_penalty: f64,
    /// Area of false-positive boxes as a fraction of the image area.
    pub fp_area_ratios: [f64; 4],
}

impl Default for SyntheticModel {
    fn default() -> Self {
        Self {
            seed: 0,
            recall_base: 0.42,
            recall_gain: 0.045,
            tp_score_shape: BetaShape { alpha: 5.0, beta: 2.0 },
            fp_rate: 0.5,
            fp_score_shape: BetaShape { alpha: 1.0, beta: 8.0 },
            localization_jitter: 2.0,
            false_label_penalty: 1.0,
            fp_area_ratios: MEAN_AREA_RATIOS,
        }
    }
}

impl SyntheticModel {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.recall_base,
            self.recall_gain,
            self.fp_rate,
            self.localization_jitter,
            self.false_label_penalty,
        ];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config("synthetic detector rates must be finite and >= 0".into()));
        }
        for s in [self.tp_score_shape, self.fp_score_shape] {
            if !(s.alpha > 0.0 && s.beta > 0.0) {
                return Err(Error::Config(format!("Beta shape {s:?} must be positive")));
            }
        }
        if self.fp_area_ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(Error::Config("fp_area_ratios must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Recall for a category trained on `n` effective labels.
    pub fn recall(&self, n: f64) -> f64 {
        (self.recall_base + self.recall_gain * (1.0 + n.max(0.0)).ln()).clamp(0.0, 1.0)
    }
}

/// What the synthetic detector learned from its last training set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SyntheticTraining {
    /// Training labels per category that match a hidden lesion (or all
    /// labels when the set carries no hidden truth).
    pub true_counts: [usize; 4],
    pub false_counts: [usize; 4],
}

impl SyntheticTraining {
    pub fn effective_count(&self, c: CategoryId, penalty: f64) -> f64 {
        let i = c.index();
        (self.true_counts[i] as f64 - penalty * self.false_counts[i] as f64).max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct ExternalDetector {
    /// Program followed by fixed leading arguments.
    pub command: Vec<String>,
    /// Scratch directory for exchanged files; also the child's working dir.
    pub workdir: PathBuf,
    pub timeout: Option<Duration>,
    /// Names of environment variables passed through to the child.
    pub env_allowlist: Vec<String>,
    lock: Arc<Mutex<()>>,
}

impl ExternalDetector {
    pub fn new(command: Vec<String>, workdir: impl Into<PathBuf>) -> Self {
        Self {
            command,
            workdir: workdir.into(),
            timeout: None,
            env_allowlist: vec!["PATH".into(), "HOME".into()],
            lock: Arc::new(Mutex::new(())),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    pub fn with_env_allowlist(mut self, names: Vec<String>) -> Self {
        self.env_allowlist = names;
        self
    }

    fn run(&self, verb: &str, data: &Path, out: &Path) -> Result<()> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| Error::Config("external detector command is empty".into()))?;
        let mut cmd = Command::new(program);
        cmd.args(args)
            .arg(verb)
            .arg("--data")
            .arg(data)
            .arg("--out")
            .arg(out)
            .current_dir(&self.workdir)
            .env_clear()
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped());
        for name in &self.env_allowlist {
            if let Some(v) = std::env::var_os(name) {
                cmd.env(name, v);
            }
        }
        log::info!("running external detector: {program} {verb}");
        let mut child = cmd.spawn().map_err(|e| Error::Detector {
            message: format!("failed to spawn {program}: {e}"),
            stderr: String::new(),
        })?;
        let mut stderr_pipe = child.stderr.take().expect("stderr piped");
        let reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr_pipe.read_to_string(&mut s);
            s
        });
        let started = Instant::now();
        let status = loop {
            match child.try_wait().map_err(|e| Error::io(&self.workdir, e))? {
                Some(status) => break status,
                None => {
                    if self.timeout.is_some_and(|t| started.elapsed() > t) {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(Error::Timeout(self.timeout.unwrap()));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
            }
        };
        let stderr = reader.join().unwrap_or_default();
        if !status.success() {
            return Err(Error::Detector {
                message: format!("`{program} {verb}` exited with {status}"),
                stderr,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum DetectorKind {
    External(ExternalDetector),
    Synthetic(SyntheticModel),
}

#[derive(Debug, Clone)]
enum TrainedState {
    Untrained,
    Synthetic(SyntheticTraining),
    External,
}

/// A detector plus the trained state produced by its latest `train` call.
#[derive(Debug, Clone)]
pub struct DetectorHandle {
    kind: DetectorKind,
    state: TrainedState,
    generation: u32,
    artifact_tag: Option<String>,
}

impl DetectorHandle {
    pub fn synthetic(model: SyntheticModel) -> Result<Self> {
        model.validate()?;
        Ok(Self::untrained(DetectorKind::Synthetic(model)))
    }

    pub fn external(detector: ExternalDetector) -> Result<Self> {
        std::fs::create_dir_all(&detector.workdir).map_err(|e| Error::io(&detector.workdir, e))?;
        Ok(Self::untrained(DetectorKind::External(detector)))
    }

    fn untrained(kind: DetectorKind) -> Self {
        Self {
            kind,
            state: TrainedState::Untrained,
            generation: 0,
            artifact_tag: None,
        }
    }

    pub fn kind(&self) -> &DetectorKind {
        &self.kind
    }

    /// Identifies the trained state; `None` before the first `train`.
    pub fn artifact_tag(&self) -> Option<&str> {
        self.artifact_tag.as_deref()
    }

    pub fn synthetic_training(&self) -> Option<&SyntheticTraining> {
        match &self.state {
            TrainedState::Synthetic(t) => Some(t),
            _ => None,
        }
    }

    /// Per-category recall of a trained synthetic detector.
    pub fn synthetic_recalls(&self) -> Option<[f64; 4]> {
        match (&self.kind, &self.state) {
            (DetectorKind::Synthetic(m), TrainedState::Synthetic(t)) => Some(
                CategoryId::ALL.map(|c| m.recall(t.effective_count(c, m.false_label_penalty))),
            ),
            _ => None,
        }
    }

    pub fn train(&self, train_set: &DatasetSnapshot) -> Result<DetectorHandle> {
        let generation = self.generation + 1;
        let (state, tag) = match &self.kind {
            DetectorKind::Synthetic(model) => {
                let training = tally_training_labels(train_set);
                let mut h = Sha256::new();
                h.update(b"synthetic-train");
                h.update(model.seed.to_le_bytes());
                h.update(generation.to_le_bytes());
                for n in training.true_counts.iter().chain(&training.false_counts) {
                    h.update((*n as u64).to_le_bytes());
                }
                let tag = hex::encode(&h.finalize()[..8]);
                (TrainedState::Synthetic(training), tag)
            }
            DetectorKind::External(ext) => {
                let dir = ext.workdir.join(format!("train_{generation:03}"));
                let model_dir = dir.join("model");
                std::fs::create_dir_all(&model_dir).map_err(|e| Error::io(&model_dir, e))?;
                let data = dir.join("dataset.json");
                save_dataset(train_set, &data, false)?;
                ext.run("train", &data, &model_dir)?;
                (TrainedState::External, digest_dir(&model_dir)?)
            }
        };
        Ok(DetectorHandle {
            kind: self.kind.clone(),
            state,
            generation,
            artifact_tag: Some(tag),
        })
    }

    pub fn infer(&self, images: &DatasetSnapshot) -> Result<Vec<Detection>> {
        let tag = self
            .artifact_tag
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("detector must be trained before inference".into()))?;
        match (&self.kind, &self.state) {
            (DetectorKind::Synthetic(model), TrainedState::Synthetic(training)) => {
                let recalls =
                    CategoryId::ALL.map(|c| model.recall(training.effective_count(c, model.false_label_penalty)));
                let per_image = par::map(images.images(), |img| synthetic_image(model, &recalls, tag, img));
                Ok(per_image.into_iter().flatten().collect())
            }
            (DetectorKind::External(ext), _) => {
                let dir = ext.workdir.join(format!("infer_{:03}_{tag}", self.generation));
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let data = dir.join("dataset.json");
                let out = dir.join("detections.jsonl");
                save_dataset(images, &data, false)?;
                ext.run("infer", &data, &out)?;
                let text = std::fs::read_to_string(&out).map_err(|e| {
                    Error::Protocol(format!("cannot read detections {}: {e}", out.display()))
                })?;
                let dets = parse_detections(&text, &out.display().to_string())
                    .map_err(|e| Error::Protocol(e.to_string()))?;
                let index = images.image_index();
                if let Some(d) = dets.iter().find(|d| !index.contains_key(d.image_id.as_str())) {
                    return Err(Error::Protocol(format!(
                        "detection references unknown image {}",
                        d.image_id
                    )));
                }
                Ok(dets)
            }
            _ => unreachable!("trained state always matches the detector kind"),
        }
    }
}

/// Splits training labels into those matching a hidden lesion of the same
/// category and those matching none.
fn tally_training_labels(train_set: &DatasetSnapshot) -> SyntheticTraining {
    let cf = CfParams::default();
    let per_image = par::map(train_set.images(), |img| {
        let mut t = SyntheticTraining::default();
        for a in &img.annotations {
            let i = a.category.index();
            let is_true = match &img.hidden_truth {
                None => true,
                Some(h) => h.iter().any(|g| g.category == a.category && cf_match(&a.bbox, &g.bbox, &cf)),
            };
            if is_true {
                t.true_counts[i] += 1;
            } else {
                t.false_counts[i] += 1;
            }
        }
        t
    });
    per_image.into_iter().fold(SyntheticTraining::default(), |mut acc, t| {
        for i in 0..4 {
            acc.true_counts[i] += t.true_counts[i];
            acc.false_counts[i] += t.false_counts[i];
        }
        acc
    })
}

fn substream(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(MIN_SCORE, 1.0 - MIN_SCORE)
}

fn synthetic_image(model: &SyntheticModel, recalls: &[f64; 4], tag: &str, img: &ImageRecord) -> Vec<Detection> {
    let seed = model.seed.to_le_bytes();
    let truth: &[Annotation] = img.hidden_truth.as_deref().unwrap_or(&img.annotations);
    let (iw, ih) = (img.width as f64, img.height as f64);
    let tp_beta = Beta::new(model.tp_score_shape.alpha, model.tp_score_shape.beta).expect("validated");
    let fp_beta = Beta::new(model.fp_score_shape.alpha, model.fp_score_shape.beta).expect("validated");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut round = substream(&[b"round", &seed, tag.as_bytes(), img.image_id.as_bytes()]);
    let mut out = Vec::new();

    for (j, g) in truth.iter().enumerate() {
        let mut lesion = substream(&[b"lesion", &seed, img.image_id.as_bytes(), &(j as u64).to_le_bytes()]);
        let u: f64 = lesion.random();
        let jitter: [f64; 4] = std::array::from_fn(|_| unit.sample(&mut lesion));
        let score = clamp_score(tp_beta.sample(&mut lesion));
        if u >= recalls[g.category.index()] {
            continue;
        }
        let bbox = if model.localization_jitter > 0.0 {
            let s = model.localization_jitter;
            let (cx, cy) = g.bbox.center();
            let w = g.bbox.w() * (s / g.bbox.w() * jitter[2]).exp();
            let h = g.bbox.h() * (s / g.bbox.h() * jitter[3]).exp();
            match BBox::centered(cx + s * jitter[0], cy + s * jitter[1], w, h)
                .ok()
                .and_then(|b| b.clamp_to(iw, ih))
            {
                Some(b) => b,
                None => continue,
            }
        } else {
            g.bbox
        };
        out.push(Detection::new(img.image_id.clone(), bbox, g.category, score).expect("score clamped"));
    }

    let n_fp = if model.fp_rate > 0.0 {
        Poisson::new(model.fp_rate).expect("positive rate").sample(&mut round) as usize
    } else {
        0
    };
    for _ in 0..n_fp {
        let category = CategoryId::ALL[round.random_range(0..4)];
        let aspect = [0.5, 1.0, 2.0][round.random_range(0..3)];
        let area = model.fp_area_ratios[category.index()] * iw * ih;
        let w = (area * aspect).sqrt().min(iw);
        let h = (area / aspect).sqrt().min(ih);
        let x = round.random::<f64>() * (iw - w);
        let y = round.random::<f64>() * (ih - h);
        let score = clamp_score(fp_beta.sample(&mut round));
        if let Ok(bbox) = BBox::new(x, y, w, h) {
            out.push(Detection::new(img.image_id.clone(), bbox, category, score).expect("score clamped"));
        }
    }
    out
}

/// Hex SHA-256 over every file (relative path and bytes) under `dir`.
fn digest_dir(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Detector {
            message: format!("cannot walk {}: {e}", dir.display()),
            stderr: String::new(),
        })?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(dir).unwrap_or(entry.path());
            h.update(rel.to_string_lossy().as_bytes());
            let bytes = std::fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(hex::encode(&h.finalize()[..8]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::Split;

    fn truth_snapshot(n_images: usize, per_image: usize) -> DatasetSnapshot {
        let images = (0..n_images)
            .map(|i| {
                let mut img = ImageRecord::new(format!("img{i:03}"), 1000, 1000);
                img.hidden_truth = Some(
                    (0..per_image)
                        .map(|k| {
                            let b = BBox::new(50.0 + 90.0 * k as f64, 100.0 + 7.0 * i as f64, 30.0, 25.0).unwrap();
                            Annotation::manual(b, CategoryId::ALL[k % 4])
                        })
                        .collect(),
                );
                img
            })
            .collect();
        DatasetSnapshot::new(0, Split::Train, images).unwrap()
    }

    fn perfect() -> SyntheticModel {
        SyntheticModel {
            recall_base: 1.0,
            recall_gain: 0.0,
            fp_rate: 0.0,
            localization_jitter: 0.0,
            ..SyntheticModel::default()
        }
    }

    #[test]
    fn recall_is_base_on_empty_training() {
        let m = SyntheticModel::default();
        let h = DetectorHandle::synthetic(m.clone()).unwrap();
        let trained = h.train(&truth_snapshot(3, 0)).unwrap();
        assert_eq!(trained.synthetic_recalls().unwrap(), [m.recall_base; 4]);
    }

    #[test]
    fn recall_grows_with_counts() {
        let m = SyntheticModel::default();
        assert!(m.recall(200.0) > m.recall(100.0));
        assert_eq!(m.recall(0.0), m.recall_base);
        let capped = SyntheticModel {
            recall_base: 0.99,
            recall_gain: 1.0,
            ..m
        };
        assert_eq!(capped.recall(1e6), 1.0);
    }

    #[test]
    fn tag_changes_on_every_train() {
        let h = DetectorHandle::synthetic(SyntheticModel::default()).unwrap();
        assert!(h.artifact_tag().is_none());
        let s = truth_snapshot(2, 3);
        let a = h.train(&s).unwrap();
        let b = a.train(&s).unwrap();
        assert_ne!(a.artifact_tag(), b.artifact_tag());
        assert!(h.infer(&s).is_err());
    }

    #[test]
    fn perfect_oracle_returns_hidden_truth() {
        let s = truth_snapshot(4, 5);
        let h = DetectorHandle::synthetic(perfect()).unwrap().train(&s).unwrap();
        let dets = h.infer(&s).unwrap();
        assert_eq!(dets.len(), 20);
        for img in s.images() {
            let mine: Vec<_> = dets.iter().filter(|d| d.image_id == img.image_id).collect();
            for (d, g) in mine.iter().zip(img.hidden_truth.as_ref().unwrap()) {
                assert_eq!(d.bbox, g.bbox);
                assert_eq!(d.category, g.category);
            }
        }
    }

    #[test]
    fn zero_recall_without_fp_is_silent() {
        let s = truth_snapshot(4, 5);
        let m = SyntheticModel {
            recall_base: 0.0,
            recall_gain: 0.0,
            fp_rate: 0.0,
            ..SyntheticModel::default()
        };
        let h = DetectorHandle::synthetic(m).unwrap().train(&s).unwrap();
        assert!(h.infer(&s).unwrap().is_empty());
    }

    #[test]
    fn inference_is_deterministic_and_in_range() {
        let s = truth_snapshot(20, 6);
        let m = SyntheticModel {
            fp_rate: 3.0,
            ..SyntheticModel::default()
        };
        let h = DetectorHandle::synthetic(m).unwrap().train(&s).unwrap();
        let a = h.infer(&s).unwrap();
        assert_eq!(a, h.infer(&s).unwrap());
        assert!(a.iter().all(|d| d.score() > 0.0 && d.score() < 1.0));
        // per-image streams: inferring a subset gives the same detections
        let sub = DatasetSnapshot::new(0, Split::Train, s.images()[5..9].to_vec()).unwrap();
        let b = h.infer(&sub).unwrap();
        let expected: Vec<_> = a.iter().filter(|d| b.iter().any(|x| x.image_id == d.image_id)).cloned().collect();
        assert_eq!(b, expected);
    }

    #[test]
    fn jittered_detections_cf_match_their_lesion() {
        let s = truth_snapshot(10, 8);
        let m = SyntheticModel {
            recall_base: 1.0,
            fp_rate: 0.0,
            localization_jitter: 2.0,
            ..SyntheticModel::default()
        };
        let h = DetectorHandle::synthetic(m).unwrap().train(&s).unwrap();
        let cf = CfParams::default();
        for d in h.infer(&s).unwrap() {
            let img = s.images().iter().find(|i| i.image_id == d.image_id).unwrap();
            assert!(img
                .hidden_truth
                .as_ref()
                .unwrap()
                .iter()
                .any(|g| g.category == d.category && cf_match(&d.bbox, &g.bbox, &cf)));
        }
    }

    #[test]
    fn false_labels_are_penalized() {
        let mut s = truth_snapshot(1, 4);
        let mut images = s.into_images();
        let truth = images[0].hidden_truth.clone().unwrap();
        images[0].annotations = truth.clone();
        images[0]
            .annotations
            .push(Annotation::pseudo(BBox::new(900.0, 900.0, 10.0, 10.0).unwrap(), truth[0].category, 0.4, 1).unwrap());
        s = DatasetSnapshot::new(0, Split::Train, images).unwrap();
        let h = DetectorHandle::synthetic(SyntheticModel::default()).unwrap().train(&s).unwrap();
        let t = h.synthetic_training().unwrap();
        assert_eq!(t.true_counts, [1, 1, 1, 1]);
        assert_eq!(t.false_counts, [1, 0, 0, 0]);
        assert_eq!(t.effective_count(truth[0].category, 1.0), 0.0);
    }
}

//! Annotation data model and dataset persistence.
//!
//! A [`DatasetSnapshot`] holds the manual labels (LGT) and accepted pseudo
//! labels (UGT) of every image. In simulation mode each image also carries
//! `hidden_truth`, the complete lesion set, which is never written to files
//! handed to a detector.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const SCHEMA_VERSION: u32 = 1;

/// A manual and a pseudo label of the same category on one image must stay
/// below this IoU.
pub const DISJOINT_IOU: f64 = 0.05;

/// Lesion category. Only 1..=4 are admitted: blot hemorrhage, microaneurysm,
/// hard exudate, cotton wool spot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CategoryId(u8);

impl CategoryId {
    pub const ALL: [CategoryId; 4] = [CategoryId(1), CategoryId(2), CategoryId(3), CategoryId(4)];

    pub fn new(id: i64) -> Result<Self> {
        if (1..=4).contains(&id) {
            Ok(CategoryId(id as u8))
        } else {
            Err(Error::InvalidInput(format!("category {id} is outside 1-4")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for CategoryId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.0)
    }
}

impl<'de> Deserialize<'de> for CategoryId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        CategoryId::new(v).map_err(serde::de::Error::custom)
    }
}

/// Per-category tallies for categories 1-4. Serialized as `{"1": n, ...}`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CategoryCounts(pub [usize; 4]);

impl CategoryCounts {
    pub fn get(&self, c: CategoryId) -> usize {
        self.0[c.index()]
    }

    pub fn add(&mut self, c: CategoryId, n: usize) {
        self.0[c.index()] += n;
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (CategoryId, usize)> + '_ {
        CategoryId::ALL.into_iter().map(|c| (c, self.get(c)))
    }
}

impl std::ops::Index<CategoryId> for CategoryCounts {
    type Output = usize;
    fn index(&self, c: CategoryId) -> &usize {
        &self.0[c.index()]
    }
}

impl Serialize for CategoryCounts {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<String, usize> = self.iter().map(|(c, n)| (c.to_string(), n)).collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CategoryCounts {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, usize>::deserialize(d)?;
        let mut out = CategoryCounts::default();
        for (k, v) in map {
            let id: i64 = k.parse().map_err(serde::de::Error::custom)?;
            out.add(CategoryId::new(id).map_err(serde::de::Error::custom)?, v);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Manual,
    /// Accepted by the selection criterion in the given round (>= 1).
    Pseudo { round: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OriginFilter {
    Manual,
    Pseudo,
}

impl OriginFilter {
    fn admits(self, origin: Origin) -> bool {
        matches!(
            (self, origin),
            (OriginFilter::Manual, Origin::Manual) | (OriginFilter::Pseudo, Origin::Pseudo { .. })
        )
    }
}

/// One lesion instance on one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub category: CategoryId,
    confidence: f64,
    origin: Origin,
}

impl Annotation {
    /// A manually drawn label; confidence is always 1.
    pub fn manual(bbox: BBox, category: CategoryId) -> Self {
        Self {
            bbox,
            category,
            confidence: 1.0,
            origin: Origin::Manual,
        }
    }

    pub fn pseudo(bbox: BBox, category: CategoryId, confidence: f64, round: u32) -> Result<Self> {
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(Error::InvalidInput(format!(
                "pseudo label confidence {confidence} outside (0, 1)"
            )));
        }
        if round == 0 {
            return Err(Error::InvalidInput("pseudo label round must be >= 1".into()));
        }
        Ok(Self {
            bbox,
            category,
            confidence,
            origin: Origin::Pseudo { round },
        })
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn is_manual(&self) -> bool {
        self.origin == Origin::Manual
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
    /// Complete lesion set; present only in simulation.
    pub hidden_truth: Option<Vec<Annotation>>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            annotations: Vec::new(),
            hidden_truth: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let (w, h) = (self.width as f64, self.height as f64);
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invariant(format!("image {} has zero size", self.image_id)));
        }
        let all = self
            .annotations
            .iter()
            .chain(self.hidden_truth.iter().flatten());
        for a in all {
            if !a.bbox.within(w, h) {
                return Err(Error::Invariant(format!(
                    "annotation {:?} lies outside image {} ({}x{})",
                    a.bbox, self.image_id, self.width, self.height
                )));
            }
        }
        for a in self.annotations.iter().filter(|a| a.is_manual()) {
            for p in self.annotations.iter().filter(|p| !p.is_manual()) {
                if a.category == p.category && iou(&a.bbox, &p.bbox) >= DISJOINT_IOU {
                    return Err(Error::Invariant(format!(
                        "pseudo label {:?} overlaps manual label {:?} on image {}",
                        p.bbox, a.bbox, self.image_id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
}

/// Immutable per-round view of a dataset. Rounds produce new snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSnapshot {
    round_index: u32,
    split: Split,
    images: Vec<ImageRecord>,
}

impl DatasetSnapshot {
    pub fn new(round_index: u32, split: Split, images: Vec<ImageRecord>) -> Result<Self> {
        let mut seen = HashMap::with_capacity(images.len());
        for img in &images {
            if seen.insert(img.image_id.as_str(), ()).is_some() {
                return Err(Error::Invariant(format!("duplicate image id {}", img.image_id)));
            }
            img.validate()?;
        }
        Ok(Self {
            round_index,
            split,
            images,
        })
    }

    pub fn round_index(&self) -> u32 {
        self.round_index
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn into_images(self) -> Vec<ImageRecord> {
        self.images
    }

    pub fn has_hidden_truth(&self) -> bool {
        self.images.iter().any(|i| i.hidden_truth.is_some())
    }

    pub fn image_index(&self) -> HashMap<&str, usize> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, img)| (img.image_id.as_str(), i))
            .collect()
    }

    pub fn annotation_count(&self) -> usize {
        self.images.iter().map(|i| i.annotations.len()).sum()
    }

    /// Copy with `hidden_truth` removed, as handed to detectors.
    pub fn without_hidden_truth(&self) -> DatasetSnapshot {
        let images = self
            .images
            .iter()
            .map(|img| ImageRecord {
                hidden_truth: None,
                ..img.clone()
            })
            .collect();
        DatasetSnapshot {
            images,
            ..*self
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_round_index(mut self, round_index: u32) -> Self {
        self.round_index = round_index;
        self
    }
}

/// Summary of what ingest accepted, rejected and clamped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub accepted: usize,
    pub rejected_by_reason: BTreeMap<String, usize>,
    pub clamped: usize,
}

impl LoadReport {
    fn reject(&mut self, reason: &str) {
        *self.rejected_by_reason.entry(reason.to_string()).or_default() += 1;
    }

    pub fn rejected(&self) -> usize {
        self.rejected_by_reason.values().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    NativeJson,
    CocoLikeJson,
}

#[derive(Debug, Serialize, Deserialize)]
struct NativeFile {
    schema_version: u32,
    #[serde(default)]
    round_index: u32,
    #[serde(default)]
    split: Split,
    images: Vec<NativeImage>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NativeImage {
    image_id: String,
    width: u32,
    height: u32,
    annotations: Vec<AnnotationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden_truth: Option<Vec<AnnotationRecord>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum OriginTag {
    Manual,
    Pseudo,
}

/// On-disk annotation record: `{x, y, w, h, c, confidence, origin, round?}`.
#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    c: i64,
    #[serde(default = "one")]
    confidence: f64,
    #[serde(default = "manual_tag")]
    origin: OriginTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    round: Option<u32>,
}

fn one() -> f64 {
    1.0
}

fn manual_tag() -> OriginTag {
    OriginTag::Manual
}

impl From<&Annotation> for AnnotationRecord {
    fn from(a: &Annotation) -> Self {
        let (origin, round) = match a.origin {
            Origin::Manual => (OriginTag::Manual, None),
            Origin::Pseudo { round } => (OriginTag::Pseudo, Some(round)),
        };
        Self {
            x: a.bbox.x(),
            y: a.bbox.y(),
            w: a.bbox.w(),
            h: a.bbox.h(),
            c: a.category.get() as i64,
            confidence: a.confidence,
            origin,
            round,
        }
    }
}

/// Validates one raw record against its image, clamping to the image bounds.
/// Rejections are tallied in `report` and yield `None`.
fn ingest_record(
    rec: &AnnotationRecord,
    width: u32,
    height: u32,
    report: &mut LoadReport,
    context: &str,
) -> Option<Annotation> {
    let category = match CategoryId::new(rec.c) {
        Ok(c) => c,
        Err(_) => {
            log::warn!("{context}: rejected annotation with category {}", rec.c);
            report.reject("category_out_of_range");
            return None;
        }
    };
    let Ok(raw) = BBox::new(rec.x, rec.y, rec.w, rec.h) else {
        log::warn!("{context}: rejected degenerate box ({}, {}, {}, {})", rec.x, rec.y, rec.w, rec.h);
        report.reject("invalid_box");
        return None;
    };
    let Some(bbox) = raw.clamp_to(width as f64, height as f64) else {
        report.reject("outside_image");
        return None;
    };
    if bbox != raw {
        report.clamped += 1;
    }
    let ann = match (rec.origin, rec.round) {
        (OriginTag::Manual, _) => {
            if rec.confidence != 1.0 {
                report.reject("manual_confidence_not_one");
                return None;
            }
            Annotation::manual(bbox, category)
        }
        (OriginTag::Pseudo, round) => {
            match Annotation::pseudo(bbox, category, rec.confidence, round.unwrap_or(0)) {
                Ok(a) => a,
                Err(_) => {
                    report.reject("invalid_pseudo_label");
                    return None;
                }
            }
        }
    };
    report.accepted += 1;
    Some(ann)
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<(DatasetSnapshot, LoadReport)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, format, &path.display().to_string())
}

/// Parses a dataset document. `context` labels error messages.
pub fn parse_dataset(
    text: &str,
    format: DatasetFormat,
    context: &str,
) -> Result<(DatasetSnapshot, LoadReport)> {
    match format {
        DatasetFormat::NativeJson => parse_native(text, context),
        DatasetFormat::CocoLikeJson => parse_coco(text, context),
    }
}

fn parse_native(text: &str, context: &str) -> Result<(DatasetSnapshot, LoadReport)> {
    let file: NativeFile = serde_json::from_str(text).map_err(|e| Error::format(context, e))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::format(
            context,
            format!("unsupported schema_version {}", file.schema_version),
        ));
    }
    let mut report = LoadReport::default();
    let mut images = Vec::with_capacity(file.images.len());
    for img in file.images {
        let ctx = format!("{context}: image {}", img.image_id);
        let annotations = img
            .annotations
            .iter()
            .filter_map(|r| ingest_record(r, img.width, img.height, &mut report, &ctx))
            .collect();
        let hidden_truth = img.hidden_truth.as_ref().map(|h| {
            h.iter()
                .filter_map(|r| ingest_record(r, img.width, img.height, &mut report, &ctx))
                .collect()
        });
        images.push(ImageRecord {
            image_id: img.image_id,
            width: img.width,
            height: img.height,
            annotations,
            hidden_truth,
        });
    }
    let snapshot = DatasetSnapshot::new(file.round_index, file.split, images)
        .map_err(|e| Error::format(context, e))?;
    Ok((snapshot, report))
}

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: serde_json::Value,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: serde_json::Value,
    bbox: [f64; 4],
    category_id: i64,
}

fn coco_id(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_coco(text: &str, context: &str) -> Result<(DatasetSnapshot, LoadReport)> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| Error::format(context, e))?;
    let mut images: Vec<ImageRecord> = file
        .images
        .iter()
        .map(|i| ImageRecord::new(coco_id(&i.id), i.width, i.height))
        .collect();
    let index: HashMap<String, usize> = images
        .iter()
        .enumerate()
        .map(|(k, img)| (img.image_id.clone(), k))
        .collect();
    let mut report = LoadReport::default();
    for (n, a) in file.annotations.iter().enumerate() {
        let id = coco_id(&a.image_id);
        let Some(&k) = index.get(&id) else {
            return Err(Error::format(
                context,
                format!("annotation #{n} references unknown image_id {id}"),
            ));
        };
        let rec = AnnotationRecord {
            x: a.bbox[0],
            y: a.bbox[1],
            w: a.bbox[2],
            h: a.bbox[3],
            c: a.category_id,
            confidence: 1.0,
            origin: OriginTag::Manual,
            round: None,
        };
        let (w, h) = (images[k].width, images[k].height);
        let ctx = format!("{context}: annotation #{n}");
        if let Some(ann) = ingest_record(&rec, w, h, &mut report, &ctx) {
            images[k].annotations.push(ann);
        }
    }
    let snapshot =
        DatasetSnapshot::new(0, Split::Train, images).map_err(|e| Error::format(context, e))?;
    Ok((snapshot, report))
}

/// Renders the native JSON document. Hidden truth is written only when
/// `include_hidden` is set.
pub fn to_native_json(snapshot: &DatasetSnapshot, include_hidden: bool) -> String {
    let file = NativeFile {
        schema_version: SCHEMA_VERSION,
        round_index: snapshot.round_index,
        split: snapshot.split,
        images: snapshot
            .images
            .iter()
            .map(|img| NativeImage {
                image_id: img.image_id.clone(),
                width: img.width,
                height: img.height,
                annotations: img.annotations.iter().map(AnnotationRecord::from).collect(),
                hidden_truth: if include_hidden {
                    img.hidden_truth
                        .as_ref()
                        .map(|h| h.iter().map(AnnotationRecord::from).collect())
                } else {
                    None
                },
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("dataset serializes");
    s.push('\n');
    s
}

/// Writes the native file, creating missing parent directories.
pub fn save_dataset(snapshot: &DatasetSnapshot, path: &Path, include_hidden: bool) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, to_native_json(snapshot, include_hidden)).map_err(|e| Error::io(path, e))
}

/// Image-level random partition. `ratio` is the train fraction.
pub fn split_dataset(
    snapshot: &DatasetSnapshot,
    ratio: f64,
    seed: u64,
) -> Result<(DatasetSnapshot, DatasetSnapshot)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidInput(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n = snapshot.images.len();
    let n_train = (n as f64 * ratio).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidInput(format!(
            "splitting {n} images at ratio {ratio} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (train, val): (Vec<_>, Vec<_>) = snapshot
        .images
        .iter()
        .cloned()
        .zip(is_train)
        .partition(|(_, t)| *t);
    let strip = |v: Vec<(ImageRecord, bool)>| v.into_iter().map(|(i, _)| i).collect::<Vec<_>>();
    Ok((
        DatasetSnapshot {
            round_index: snapshot.round_index,
            split: Split::Train,
            images: strip(train),
        },
        DatasetSnapshot {
            round_index: snapshot.round_index,
            split: Split::Validation,
            images: strip(val),
        },
    ))
}

/// Pixel window kept by a crop, in original image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub left: u32,
    pub top: u32,
    pub width: u32,
    pub height: u32,
}

impl CropWindow {
    /// Window of the given size centered in a `width x height` image.
    pub fn centered(width: u32, height: u32, new_width: u32, new_height: u32) -> Result<Self> {
        if new_width > width || new_height > height {
            return Err(Error::InvalidInput(format!(
                "crop {new_width}x{new_height} exceeds image {width}x{height}"
            )));
        }
        Ok(Self {
            left: (width - new_width) / 2,
            top: (height - new_height) / 2,
            width: new_width,
            height: new_height,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CropReport {
    pub dropped: usize,
    pub clamped: usize,
}

pub fn apply_crop_transform(
    snapshot: &DatasetSnapshot,
    crop: CropWindow,
) -> Result<(DatasetSnapshot, CropReport)> {
    if crop.width == 0 || crop.height == 0 {
        return Err(Error::InvalidInput("crop window has zero size".into()));
    }
    let mut report = CropReport::default();
    let (dx, dy) = (-(crop.left as f64), -(crop.top as f64));
    let (cw, ch) = (crop.width as f64, crop.height as f64);
    let mut shift = |anns: &[Annotation]| -> Result<Vec<Annotation>> {
        let mut out = Vec::with_capacity(anns.len());
        for a in anns {
            let moved = a.bbox.translate(dx, dy)?;
            match moved.clamp_to(cw, ch) {
                None => report.dropped += 1,
                Some(b) => {
                    if b != moved {
                        report.clamped += 1;
                    }
                    out.push(Annotation { bbox: b, ..*a });
                }
            }
        }
        Ok(out)
    };
    let mut images = Vec::with_capacity(snapshot.images.len());
    for img in &snapshot.images {
        if crop.left + crop.width > img.width || crop.top + crop.height > img.height {
            return Err(Error::InvalidInput(format!(
                "crop window {crop:?} exceeds image {} ({}x{})",
                img.image_id, img.width, img.height
            )));
        }
        let annotations = shift(&img.annotations)?;
        let hidden_truth = match &img.hidden_truth {
            Some(h) => Some(shift(h)?),
            None => None,
        };
        images.push(ImageRecord {
            image_id: img.image_id.clone(),
            width: crop.width,
            height: crop.height,
            annotations,
            hidden_truth,
        });
    }
    Ok((
        DatasetSnapshot::new(snapshot.round_index, snapshot.split, images)?,
        report,
    ))
}

pub fn count_by_category(snapshot: &DatasetSnapshot, filter: Option<OriginFilter>) -> CategoryCounts {
    let mut counts = CategoryCounts::default();
    for a in snapshot.images.iter().flat_map(|i| &i.annotations) {
        if filter.is_none_or(|f| f.admits(a.origin)) {
            counts.add(a.category, 1);
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cat(c: i64) -> CategoryId {
        CategoryId::new(c).unwrap()
    }

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    const TWO_IMAGES: &str = r#"{
      "schema_version": 1,
      "images": [
        {"image_id": "a", "width": 100, "height": 100, "annotations": [
          {"x": 1, "y": 2, "w": 3, "h": 4, "c": 1, "confidence": 1.0, "origin": "manual"},
          {"x": 10, "y": 20, "w": 5, "h": 5, "c": 2, "confidence": 1.0, "origin": "manual"}
        ]},
        {"image_id": "b", "width": 50, "height": 40, "annotations": [
          {"x": 0, "y": 0, "w": 8, "h": 8, "c": 4, "confidence": 1.0, "origin": "manual"}
        ]}
      ]
    }"#;

    #[test]
    fn loads_well_formed_native_file() {
        let (s, report) = parse_dataset(TWO_IMAGES, DatasetFormat::NativeJson, "t").unwrap();
        assert_eq!(s.images().len(), 2);
        assert_eq!(report.accepted, 3);
        assert_eq!(report.rejected(), 0);
        let all: Vec<_> = s.images().iter().flat_map(|i| &i.annotations).collect();
        assert_eq!(all.len(), 3);
        assert!(all.iter().all(|a| a.is_manual() && a.confidence() == 1.0));
    }

    #[test]
    fn rejects_out_of_range_category_and_continues() {
        let text = TWO_IMAGES.replace(r#""c": 2"#, r#""c": 7"#);
        let (s, report) = parse_dataset(&text, DatasetFormat::NativeJson, "t").unwrap();
        assert_eq!(report.accepted, 2);
        assert_eq!(report.rejected_by_reason["category_out_of_range"], 1);
        assert_eq!(s.annotation_count(), 2);
    }

    #[test]
    fn empty_annotation_list_is_valid() {
        let text = r#"{"schema_version":1,"images":[{"image_id":"x","width":10,"height":10,"annotations":[]}]}"#;
        let (s, report) = parse_dataset(text, DatasetFormat::NativeJson, "t").unwrap();
        assert_eq!(s.annotation_count(), 0);
        assert_eq!(report, LoadReport::default());
    }

    #[test]
    fn clamps_overhanging_boxes() {
        let text = r#"{"schema_version":1,"images":[{"image_id":"x","width":10,"height":10,"annotations":[
            {"x": 8, "y": 8, "w": 5, "h": 5, "c": 1}]}]}"#;
        let (s, report) = parse_dataset(text, DatasetFormat::NativeJson, "t").unwrap();
        assert_eq!(report.clamped, 1);
        let b = s.images()[0].annotations[0].bbox;
        assert_eq!((b.w(), b.h()), (2.0, 2.0));
    }

    #[test]
    fn manual_confidence_must_be_one() {
        let text = r#"{"schema_version":1,"images":[{"image_id":"x","width":10,"height":10,"annotations":[
            {"x": 1, "y": 1, "w": 2, "h": 2, "c": 1, "confidence": 0.5, "origin": "manual"}]}]}"#;
        let (_, report) = parse_dataset(text, DatasetFormat::NativeJson, "t").unwrap();
        assert_eq!(report.rejected_by_reason["manual_confidence_not_one"], 1);
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = parse_dataset("{\"schema_version\": 1,\n \"images\": [ {", DatasetFormat::NativeJson, "f.json")
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(msg.contains("f.json") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn loads_coco_like_file() {
        let text = r#"{
          "images": [{"id": 7, "file_name": "7.jpg", "width": 64, "height": 64}],
          "annotations": [
            {"id": 1, "image_id": 7, "bbox": [1, 1, 4, 4], "category_id": 3},
            {"id": 2, "image_id": 7, "bbox": [9, 9, 4, 4], "category_id": 9}
          ],
          "categories": [{"id": 3, "name": "hard exudate"}]
        }"#;
        let (s, report) = parse_dataset(text, DatasetFormat::CocoLikeJson, "c").unwrap();
        assert_eq!(s.images()[0].image_id, "7");
        assert_eq!(report.accepted, 1);
        assert_eq!(report.rejected(), 1);
    }

    #[test]
    fn save_marks_pseudo_origin_and_hides_truth() {
        let mut img = ImageRecord::new("a", 100, 100);
        img.annotations.push(Annotation::manual(bx(0.0, 0.0, 5.0, 5.0), cat(1)));
        img.annotations
            .push(Annotation::pseudo(bx(50.0, 50.0, 5.0, 5.0), cat(2), 0.7, 2).unwrap());
        img.hidden_truth = Some(vec![Annotation::manual(bx(80.0, 80.0, 5.0, 5.0), cat(3))]);
        let s = DatasetSnapshot::new(2, Split::Train, vec![img]).unwrap();
        let hidden = to_native_json(&s, false);
        assert!(hidden.contains(r#""origin": "pseudo""#) && hidden.contains(r#""round": 2"#));
        assert!(!hidden.contains("hidden_truth"));
        let full = to_native_json(&s, true);
        assert!(full.contains("hidden_truth"));
        let (back, _) = parse_dataset(&full, DatasetFormat::NativeJson, "t").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn snapshot_rejects_pseudo_overlapping_manual() {
        let mut img = ImageRecord::new("a", 100, 100);
        img.annotations.push(Annotation::manual(bx(0.0, 0.0, 10.0, 10.0), cat(1)));
        img.annotations
            .push(Annotation::pseudo(bx(1.0, 1.0, 10.0, 10.0), cat(1), 0.9, 1).unwrap());
        assert!(matches!(
            DatasetSnapshot::new(0, Split::Train, vec![img]),
            Err(Error::Invariant(_))
        ));
    }

    fn n_images(n: usize) -> DatasetSnapshot {
        let images = (0..n).map(|i| ImageRecord::new(format!("img{i:04}"), 10, 10)).collect();
        DatasetSnapshot::new(0, Split::Train, images).unwrap()
    }

    #[test]
    fn split_examples() {
        let s = n_images(10);
        let (t, v) = split_dataset(&s, 0.8, 42).unwrap();
        assert_eq!((t.images().len(), v.images().len()), (8, 2));
        assert_eq!(v.split(), Split::Validation);
        let (t2, v2) = split_dataset(&s, 0.8, 42).unwrap();
        assert_eq!((t, v), (t2, v2));

        let big = n_images(5198);
        let (t, v) = split_dataset(&big, 0.8, 1).unwrap();
        assert_eq!(t.images().len() + v.images().len(), 5198);
        assert!((t.images().len() as i64 - 4158).abs() <= 1);

        assert!(split_dataset(&n_images(1), 0.8, 1).is_err());
        assert!(split_dataset(&s, 1.0, 1).is_err());
    }

    #[test]
    fn center_crop_shifts_by_540() {
        let mut img = ImageRecord::new("fundus", 3216, 2136);
        img.annotations.push(Annotation::manual(bx(1000.0, 300.0, 40.0, 40.0), cat(2)));
        img.annotations.push(Annotation::manual(bx(10.0, 300.0, 40.0, 40.0), cat(1)));
        img.annotations.push(Annotation::manual(bx(520.0, 300.0, 40.0, 40.0), cat(1)));
        let s = DatasetSnapshot::new(0, Split::Train, vec![img]).unwrap();
        let crop = CropWindow::centered(3216, 2136, 2136, 2136).unwrap();
        assert_eq!(crop.left, 540);
        let (out, report) = apply_crop_transform(&s, crop).unwrap();
        let img = &out.images()[0];
        assert_eq!((img.width, img.height), (2136, 2136));
        assert_eq!(report, CropReport { dropped: 1, clamped: 1 });
        assert_eq!(img.annotations[0].bbox.x(), 460.0);
        assert_eq!(img.annotations[1].bbox.w(), 20.0);
    }

    #[test]
    fn full_crop_is_identity() {
        let (s, _) = parse_dataset(TWO_IMAGES, DatasetFormat::NativeJson, "t").unwrap();
        let s = DatasetSnapshot::new(0, Split::Train, s.images()[..1].to_vec()).unwrap();
        let (out, report) = apply_crop_transform(&s, CropWindow { left: 0, top: 0, width: 100, height: 100 }).unwrap();
        assert_eq!(out, s);
        assert_eq!(report, CropReport::default());
        assert!(apply_crop_transform(&s, CropWindow { left: 1, top: 0, width: 100, height: 100 }).is_err());
    }

    #[test]
    fn counts_by_origin() {
        assert_eq!(count_by_category(&n_images(3), None), CategoryCounts::default());
        let mut img = ImageRecord::new("a", 1000, 1000);
        img.annotations.push(Annotation::manual(bx(0.0, 0.0, 5.0, 5.0), cat(1)));
        for k in 0..10 {
            img.annotations.push(
                Annotation::pseudo(bx(100.0 + 20.0 * k as f64, 500.0, 5.0, 5.0), cat(2), 0.5, 1).unwrap(),
            );
        }
        let s = DatasetSnapshot::new(1, Split::Train, vec![img]).unwrap();
        assert_eq!(count_by_category(&s, Some(OriginFilter::Pseudo)), CategoryCounts([0, 10, 0, 0]));
        assert_eq!(count_by_category(&s, Some(OriginFilter::Manual)), CategoryCounts([1, 0, 0, 0]));
        assert_eq!(count_by_category(&s, None).total(), 11);
    }

    fn arb_annotation(size: u32) -> impl Strategy<Value = Annotation> {
        let s = size as f64;
        (0.0..s - 1.0, 0.0..s - 1.0, 0.01..1.0f64, 0.01..1.0f64, 1i64..=4)
            .prop_map(move |(x, y, fw, fh, c)| {
                let w = (s - x) * fw;
                let h = (s - y) * fh;
                Annotation::manual(BBox::new(x, y, w, h).unwrap(), CategoryId::new(c).unwrap())
            })
    }

    fn arb_snapshot() -> impl Strategy<Value = DatasetSnapshot> {
        proptest::collection::vec(
            (
                proptest::collection::vec(arb_annotation(500), 0..6),
                proptest::option::of(proptest::collection::vec(arb_annotation(500), 0..6)),
            ),
            0..5,
        )
        .prop_map(|imgs| {
            let images = imgs
                .into_iter()
                .enumerate()
                .map(|(i, (annotations, hidden_truth))| ImageRecord {
                    image_id: format!("im{i}"),
                    width: 500,
                    height: 500,
                    annotations,
                    hidden_truth,
                })
                .collect();
            DatasetSnapshot::new(3, Split::Validation, images).unwrap()
        })
    }

    proptest! {
        #[test]
        fn save_load_roundtrip(s in arb_snapshot()) {
            let text = to_native_json(&s, true);
            let (back, _) = parse_dataset(&text, DatasetFormat::NativeJson, "p").unwrap();
            prop_assert_eq!(to_native_json(&back, true), text);
            prop_assert_eq!(back, s);
        }

        #[test]
        fn split_partitions(n in 2usize..60, ratio in 0.05..0.95f64, seed in any::<u64>()) {
            let s = n_images(n);
            if let Ok((t, v)) = split_dataset(&s, ratio, seed) {
                let mut ids: Vec<_> = t.images().iter().chain(v.images()).map(|i| i.image_id.clone()).collect();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), n);
                prop_assert!((t.images().len() as f64 - n as f64 * ratio).abs() <= 1.0);
            }
        }

        #[test]
        fn crop_keeps_boxes_in_bounds(s in arb_snapshot(), l in 0u32..200, t in 0u32..200, w in 1u32..300, h in 1u32..300) {
            let (out, _) = apply_crop_transform(&s, CropWindow { left: l, top: t, width: w, height: h }).unwrap();
            for img in out.images() {
                for a in img.annotations.iter().chain(img.hidden_truth.iter().flatten()) {
                    prop_assert!(a.bbox.within(w as f64, h as f64));
                }
            }
        }
    }
}

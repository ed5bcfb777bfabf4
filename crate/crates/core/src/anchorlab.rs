//! Anchor geometry for feature pyramids and how much of a lesion population
//! the anchors can reach.
//!
//! Each pyramid level with stride `s` places a `ceil(size / s)` square grid of
//! locations at cell centers `(i + 0.5) * s`. Every location carries one
//! anchor per `(scale, ratio)` pair with `w = s * scale * sqrt(ratio)` and
//! `h = s * scale / sqrt(ratio)`. Anchors are not clipped to the image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::annotations::{CategoryCounts, CategoryId};
use crate::detector::MEAN_AREA_RATIOS;
use crate::error::{Error, Result};
use crate::geometry::{cf_match, iou, BBox, CfParams};
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpnLevel {
    pub name: String,
    pub stride: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpnConfig {
    pub levels: Vec<FpnLevel>,
}

impl FpnConfig {
    fn from_pairs(pairs: &[(&str, u32)]) -> Self {
        Self {
            levels: pairs
                .iter()
                .map(|(n, s)| FpnLevel {
                    name: n.to_string(),
                    stride: *s,
                })
                .collect(),
        }
    }

    /// Four levels P2-P5, strides 4 to 32.
    pub fn standard() -> Self {
        Self::from_pairs(&[("P2", 4), ("P3", 8), ("P4", 16), ("P5", 32)])
    }

    /// Six levels F0-F5, strides 2 to 64.
    pub fn deeper() -> Self {
        Self::from_pairs(&[("F0", 2), ("F1", 4), ("F2", 8), ("F3", 16), ("F4", 32), ("F5", 64)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("pyramid has no levels".into()));
        }
        if self.levels[0].stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if self.levels.windows(2).any(|w| w[1].stride != 2 * w[0].stride) {
            return Err(Error::Config("adjacent pyramid strides must differ by a factor of 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 2.0, 4.0, 8.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn per_location(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    /// `(w, h)` of every anchor at a level with the given stride.
    pub fn shapes(&self, stride: u32) -> Vec<(f64, f64)> {
        let base = stride as f64;
        self.scales
            .iter()
            .flat_map(|&s| {
                self.ratios
                    .iter()
                    .map(move |&r| (base * s * r.sqrt(), base * s / r.sqrt()))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_location() == 0 {
            return Err(Error::Config("anchor config needs at least one scale and ratio".into()));
        }
        if self.scales.iter().chain(&self.ratios).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("anchor scales and ratios must be positive".into()));
        }
        Ok(())
    }
}

pub fn grid_size(image_size: u32, stride: u32) -> u32 {
    image_size.div_ceil(stride).max(1)
}

#[derive(Debug, Clone)]
pub struct LevelAnchors {
    pub name: String,
    pub stride: u32,
    pub grid: u32,
    pub anchors: Vec<BBox>,
}

/// Materializes every anchor of every level. Memory grows with
/// `(size / stride)^2`; coverage analysis enumerates lazily instead.
pub fn generate_anchors(image_size: u32, fpn: &FpnConfig, anchors: &AnchorConfig) -> Result<Vec<LevelAnchors>> {
    fpn.validate()?;
    anchors.validate()?;
    fpn.levels
        .iter()
        .map(|level| {
            let grid = grid_size(image_size, level.stride);
            let s = level.stride as f64;
            let shapes = anchors.shapes(level.stride);
            let mut boxes = Vec::with_capacity((grid * grid) as usize * shapes.len());
            for j in 0..grid {
                for i in 0..grid {
                    let (cx, cy) = ((i as f64 + 0.5) * s, (j as f64 + 0.5) * s);
                    for &(w, h) in &shapes {
                        boxes.push(BBox::centered(cx, cy, w, h)?);
                    }
                }
            }
            Ok(LevelAnchors {
                name: level.name.clone(),
                stride: level.stride,
                grid,
                anchors: boxes,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Matcher {
    Cf(CfParams),
    /// IoU at or above the threshold.
    Iou(f64),
}

impl Matcher {
    pub fn matches(&self, anchor: &BBox, gt: &BBox) -> bool {
        match self {
            Matcher::Cf(p) => cf_match(anchor, gt, p),
            Matcher::Iou(t) => iou(anchor, gt) >= *t,
        }
    }

    /// Whether an IoU as high as `bound` could pass this matcher.
    fn admits(&self, bound: f64) -> bool {
        // Slack keeps the pruning exact under rounding.
        match self {
            Matcher::Cf(p) => bound + 1e-9 > p.iou_floor,
            Matcher::Iou(t) => bound + 1e-9 >= *t,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Matcher::Cf(_) => "cf".to_string(),
            Matcher::Iou(t) => format!("iou{t}"),
        }
    }

    /// Inverse of [`Matcher::label`]: `cf` or `iou<threshold>`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "cf" {
            return Ok(Matcher::Cf(CfParams::default()));
        }
        s.strip_prefix("iou")
            .and_then(|t| t.parse::<f64>().ok())
            .filter(|t| *t > 0.0 && *t <= 1.0)
            .map(Matcher::Iou)
            .ok_or_else(|| Error::Config(format!("unknown matcher {s:?}; expected cf or iou<t> with t in (0, 1]")))
    }
}

/// Index range of grid cells whose centers lie within `reach` of `center`.
fn cell_range(center: f64, reach: f64, stride: f64, grid: u32) -> Option<(u32, u32)> {
    let lo = ((center - reach) / stride - 0.5).ceil().max(0.0);
    let hi = ((center + reach) / stride - 0.5).floor().min(grid as f64 - 1.0);
    (lo <= hi).then_some((lo as u32, hi as u32))
}

/// Whether any anchor of the pyramid matches `gt`. Only anchors that overlap
/// `gt` are visited; all others have zero IoU and cannot match.
pub fn is_covered(gt: &BBox, image_size: u32, fpn: &FpnConfig, anchors: &AnchorConfig, matcher: &Matcher) -> bool {
    let (gcx, gcy) = gt.center();
    for level in &fpn.levels {
        let grid = grid_size(image_size, level.stride);
        let s = level.stride as f64;
        for (w, h) in anchors.shapes(level.stride) {
            // IoU of two boxes of these sizes is largest when centers coincide.
            let inter = w.min(gt.w()) * h.min(gt.h());
            if !matcher.admits(inter / (w * h + gt.area() - inter)) {
                continue;
            }
            let Some((x0, x1)) = cell_range(gcx, (w + gt.w()) / 2.0, s, grid) else {
                continue;
            };
            let Some((y0, y1)) = cell_range(gcy, (h + gt.h()) / 2.0, s, grid) else {
                continue;
            };
            for j in y0..=y1 {
                for i in x0..=x1 {
                    let a = BBox::centered((i as f64 + 0.5) * s, (j as f64 + 0.5) * s, w, h)
                        .expect("anchor shapes are positive");
                    if matcher.matches(&a, gt) {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Fraction of `gt_boxes` matched by at least one anchor.
pub fn coverage(
    gt_boxes: &[BBox],
    image_size: u32,
    fpn: &FpnConfig,
    anchors: &AnchorConfig,
    matcher: &Matcher,
) -> Result<f64> {
    if gt_boxes.is_empty() {
        return Err(Error::InvalidInput("coverage of an empty box set is undefined".into()));
    }
    fpn.validate()?;
    anchors.validate()?;
    let hits = par::map(gt_boxes, |g| is_covered(g, image_size, fpn, anchors, matcher));
    Ok(hits.iter().filter(|&&h| h).count() as f64 / gt_boxes.len() as f64)
}

/// A lesion described relative to its image, so the same population can be
/// rendered at any image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionSample {
    pub category: CategoryId,
    /// Box area over image area.
    pub area_ratio: f64,
    /// `w / h`.
    pub aspect: f64,
    /// Top-left position as a fraction of the free range `[0, size - w]`.
    pub rel_x: f64,
    pub rel_y: f64,
}

impl LesionSample {
    pub fn bbox_at(&self, image_size: u32) -> BBox {
        let s = image_size as f64;
        let area = self.area_ratio * s * s;
        let w = (area * self.aspect).sqrt().min(s);
        let h = (area / self.aspect).sqrt().min(s);
        BBox::new(self.rel_x * (s - w), self.rel_y * (s - h), w, h).expect("positive lesion size")
    }
}

/// Default log-std of lesion area ratios around their category mean.
pub const AREA_LOG_SIGMA: f64 = 0.8;

/// Seeded lesion population whose area ratios are log-normal around the
/// per-category means of [`MEAN_AREA_RATIOS`] with log-std `sigma`, and whose
/// aspect ratios are drawn from `{0.5, 1, 2}`.
pub fn lesion_population(counts: &CategoryCounts, seed: u64, sigma: f64) -> Result<Vec<LesionSample>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("area spread {sigma} must be finite and >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(counts.total());
    for (c, n) in counts.iter() {
        let mean = MEAN_AREA_RATIOS[c.index()];
        // mean of LogNormal(mu, sigma) is exp(mu + sigma^2 / 2)
        let dist = LogNormal::new(mean.ln() - sigma * sigma / 2.0, sigma)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        for _ in 0..n {
            out.push(LesionSample {
                category: c,
                area_ratio: dist.sample(&mut rng).min(0.25),
                aspect: [0.5, 1.0, 2.0][rng.random_range(0..3)],
                rel_x: rng.random(),
                rel_y: rng.random(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub image_size: u32,
    pub pyramid: String,
    pub category: CategoryId,
    pub matcher: String,
    pub coverage: f64,
}

/// Coverage for every `(size, pyramid, category, matcher)` combination.
pub fn coverage_sweep(
    population: &[LesionSample],
    sizes: &[u32],
    pyramids: &[(String, FpnConfig)],
    anchors: &AnchorConfig,
    matchers: &[Matcher],
) -> Result<Vec<CoverageRow>> {
    let mut rows = Vec::new();
    for &size in sizes {
        for (name, fpn) in pyramids {
            for c in CategoryId::ALL {
                let boxes: Vec<BBox> = population
                    .iter()
                    .filter(|l| l.category == c)
                    .map(|l| l.bbox_at(size))
                    .collect();
                if boxes.is_empty() {
                    continue;
                }
                for m in matchers {
                    rows.push(CoverageRow {
                        image_size: size,
                        pyramid: name.clone(),
                        category: c,
                        matcher: m.label(),
                        coverage: coverage(&boxes, size, fpn, anchors, m)?,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// CSV with header `image_size,pyramid,category,matcher,coverage`.
pub fn coverage_csv(rows: &[CoverageRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_size", "pyramid", "category", "matcher", "coverage"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.image_size.to_string(),
            r.pyramid.clone(),
            r.category.to_string(),
            r.matcher.clone(),
            format!("{:.6}", r.coverage),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// The `800, 1000, ..., 2000` input-size grid.
pub fn input_size_grid() -> Vec<u32> {
    (800..=2000).step_by(200).collect()
}

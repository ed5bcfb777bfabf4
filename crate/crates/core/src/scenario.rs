//! Synthetic partially labeled datasets with known hidden truth.
//!
//! Lesion counts per category are fixed per split. Every lesion exists in the
//! hidden truth; a fixed-size random subset of each category is copied into
//! the manual labels, so the labeled counts match the requested columns
//! exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchorlab::{lesion_population, AREA_LOG_SIGMA};
use crate::annotations::{Annotation, CategoryCounts, CategoryId, DatasetSnapshot, ImageRecord, Split};
use crate::error::{Error, Result};

/// Labeled lesions per category in the reference training split.
pub const TRAIN_LABELED: CategoryCounts = CategoryCounts([14720, 6301, 7403, 537]);
/// Labeled lesions per category in the reference validation split.
pub const VAL_LABELED: CategoryCounts = CategoryCounts([3773, 1402, 1913, 117]);

/// Fundus images after cropping the black side bands.
pub const FUNDUS_SIZE: u32 = 2136;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: u32,
    pub train_labeled: CategoryCounts,
    pub val_labeled: CategoryCounts,
    /// Fraction of hidden lesions that carry a manual label.
    pub label_fraction: f64,
    pub area_log_sigma: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_images: 4158,
            val_images: 1040,
            image_size: FUNDUS_SIZE,
            train_labeled: TRAIN_LABELED,
            val_labeled: VAL_LABELED,
            label_fraction: 0.85,
            area_log_sigma: AREA_LOG_SIGMA,
        }
    }
}

impl ScenarioConfig {
    /// Same label density at a fraction of the image count.
    pub fn scaled(&self, factor: f64) -> Self {
        let scale = |c: CategoryCounts| CategoryCounts(c.0.map(|n| ((n as f64 * factor).round() as usize).max(1)));
        Self {
            train_images: ((self.train_images as f64 * factor).round() as usize).max(1),
            val_images: ((self.val_images as f64 * factor).round() as usize).max(1),
            train_labeled: scale(self.train_labeled),
            val_labeled: scale(self.val_labeled),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "label_fraction {} outside (0, 1]",
                self.label_fraction
            )));
        }
        if self.train_images == 0 || self.val_images == 0 || self.image_size == 0 {
            return Err(Error::Config("scenario needs images of positive size".into()));
        }
        Ok(())
    }

    /// Hidden lesion count for `labeled` manual labels.
    pub fn hidden_count(&self, labeled: usize) -> usize {
        ((labeled as f64 / self.label_fraction).round() as usize).max(labeled)
    }
}

fn generate_split(
    cfg: &ScenarioConfig,
    split: Split,
    n_images: usize,
    labeled: CategoryCounts,
    seed: u64,
) -> Result<DatasetSnapshot> {
    let hidden = CategoryCounts(labeled.0.map(|n| cfg.hidden_count(n)));
    let population = lesion_population(&hidden, seed, cfg.area_log_sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1abe_1000_0000);
    let prefix = match split {
        Split::Train => "train",
        Split::Validation => "val",
    };
    let mut images: Vec<ImageRecord> = (0..n_images)
        .map(|i| {
            let mut img = ImageRecord::new(format!("{prefix}_{i:05}"), cfg.image_size, cfg.image_size);
            img.hidden_truth = Some(Vec::new());
            img
        })
        .collect();

    for c in CategoryId::ALL {
        let lesions: Vec<_> = population.iter().filter(|l| l.category == c).collect();
        let mut order: Vec<usize> = (0..lesions.len()).collect();
        order.shuffle(&mut rng);
        let mut is_labeled = vec![false; lesions.len()];
        for &k in &order[..labeled.get(c)] {
            is_labeled[k] = true;
        }
        for (lesion, labeled) in lesions.iter().zip(is_labeled) {
            let img = &mut images[rng.random_range(0..n_images)];
            let ann = Annotation::manual(lesion.bbox_at(cfg.image_size), c);
            img.hidden_truth.as_mut().expect("set above").push(ann);
            if labeled {
                img.annotations.push(ann);
            }
        }
    }
    DatasetSnapshot::new(0, split, images)
}

/// Generates `(train, validation)` snapshots carrying hidden truth.
pub fn generate(cfg: &ScenarioConfig) -> Result<(DatasetSnapshot, DatasetSnapshot)> {
    cfg.validate()?;
    let train = generate_split(cfg, Split::Train, cfg.train_images, cfg.train_labeled, cfg.seed)?;
    let val = generate_split(
        cfg,
        Split::Validation,
        cfg.val_images,
        cfg.val_labeled,
        cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
    )?;
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{count_by_category, OriginFilter};

    #[test]
    fn labeled_counts_are_exact() {
        let cfg = ScenarioConfig::default();
        let (train, val) = generate(&cfg).unwrap();
        assert_eq!(count_by_category(&train, Some(OriginFilter::Manual)), TRAIN_LABELED);
        assert_eq!(count_by_category(&val, None), VAL_LABELED);
        assert_eq!(train.images().len(), 4158);
        let hidden: usize = train.images().iter().map(|i| i.hidden_truth.as_ref().unwrap().len()).sum();
        assert_eq!(hidden, TRAIN_LABELED.0.iter().map(|&n| cfg.hidden_count(n)).sum::<usize>());
    }

    #[test]
    fn fully_labeled_scenario_has_no_missing_lesions() {
        let cfg = ScenarioConfig {
            label_fraction: 1.0,
            ..ScenarioConfig::default().scaled(0.05)
        };
        let (train, _) = generate(&cfg).unwrap();
        for img in train.images() {
            assert_eq!(img.annotations.len(), img.hidden_truth.as_ref().unwrap().len());
        }
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = ScenarioConfig::default().scaled(0.02);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = ScenarioConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().0, generate(&other).unwrap().0);
    }
}

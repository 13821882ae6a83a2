//! Round-level query strategies: budgeted top-K region selection, whole-image
//! selection by accumulated information, and the random baselines.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::info::InformationMap;
use crate::pool::{Dataset, PoolState, Rect, Region};
use crate::region::{fuse, nms_per_image, normalize_corpus_masked, valid_anchors, Fusion, RegionMap, RegionProposal};
use crate::scalar::Scalar;
use crate::seeding::{purpose, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ImageRandom,
    ImageScore,
    RegionRandom,
    RegionScore,
}

impl Strategy {
    pub fn is_region(&self) -> bool {
        matches!(self, Strategy::RegionRandom | Strategy::RegionScore)
    }

    pub fn is_scored(&self) -> bool {
        matches!(self, Strategy::ImageScore | Strategy::RegionScore)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    #[default]
    Entropy,
    VoteEntropy,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub strategy: Strategy,
    pub measure: Measure,
    pub fusion: Fusion,
    pub region_size: Option<usize>,
    /// Images per round, or their pixel equivalent for region strategies.
    pub batch_images: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            strategy: Strategy::RegionScore,
            measure: Measure::Entropy,
            fusion: Fusion::InfoOnly,
            region_size: Some(32),
            batch_images: 4,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.batch_images == 0 {
            return Err(Error::Config("batch_images must be positive".into()));
        }
        if self.strategy.is_region() && self.region_size.is_none_or(|w| w == 0) {
            return Err(Error::Config("region strategies need a positive region_size".into()));
        }
        if self.strategy.is_scored() && self.measure == Measure::None {
            return Err(Error::Config("scored strategies need an information measure".into()));
        }
        Ok(())
    }
}

/// Regions chosen in one round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub regions: Vec<Region>,
    /// Selection score per region; `None` for random picks.
    pub scores: Vec<Option<f64>>,
    pub total_pixels: usize,
}

impl Batch {
    fn push(&mut self, region: Region, score: Option<f64>) {
        self.total_pixels += region.rect.area();
        self.regions.push(region);
        self.scores.push(score);
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }
}

/// Pixels equivalent to `m` images (mean image area when sizes differ).
pub fn pixel_budget(dataset: &Dataset, m: usize) -> Result<usize> {
    if m == 0 {
        return Err(Error::Config("budget needs m > 0".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Config("budget of an empty dataset".into()));
    }
    let total = dataset.total_pixels() as u128;
    let n = dataset.len() as u128;
    // round-half-up of m * total / n
    Ok(((2 * m as u128 * total + n) / (2 * n)) as usize)
}

/// Greedy top-score selection under a pixel budget; stops at the first proposal that
/// does not fit. Ties are broken by image id, then anchor.
pub fn select_batch<T: Scalar>(mut proposals: Vec<RegionProposal<T>>, budget: usize) -> Batch {
    proposals.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.region.image_id.cmp(&b.region.image_id))
            .then_with(|| (a.region.rect.row, a.region.rect.col).cmp(&(b.region.rect.row, b.region.rect.col)))
    });
    let mut batch = Batch::default();
    for p in proposals {
        if batch.total_pixels + p.region.rect.area() > budget {
            break;
        }
        batch.push(p.region, Some(p.score.to_f64_lossy()));
    }
    batch
}

/// Per-pixel information and optional cost of one open image.
#[derive(Clone, Debug)]
pub struct PixelMaps {
    /// Index into the dataset.
    pub index: usize,
    pub info: Array2<f64>,
    pub cost: Option<Array2<f64>>,
}

/// Scored region selection: `w x w` box sums, corpus normalization over valid anchors,
/// fusion, per-image NMS against already labeled regions and budgeted top-K.
/// Returns the batch and every image's fused region map.
pub fn select_scored_regions(
    pool: &PoolState,
    dataset: &Dataset,
    maps: Vec<PixelMaps>,
    w: usize,
    fusion: Fusion,
    budget: usize,
) -> Result<(Batch, Vec<RegionMap<f64>>)> {
    let mut info_maps = Vec::with_capacity(maps.len());
    let mut cost_maps = Vec::with_capacity(maps.len());
    let mut valid = Vec::with_capacity(maps.len());
    let mut indices = Vec::with_capacity(maps.len());
    for m in maps {
        let id = &dataset.images[m.index].id;
        info_maps.push(RegionMap::aggregate(id.clone(), m.info.view(), w)?);
        if fusion.uses_cost() {
            let cost = m
                .cost
                .ok_or_else(|| Error::Config(format!("{fusion:?} needs a cost map for {id}")))?;
            cost_maps.push(RegionMap::aggregate(id.clone(), cost.view(), w)?);
        }
        valid.push(valid_anchors(pool.mask_of(m.index).0.view(), w)?);
        indices.push(m.index);
    }
    let info = normalize_corpus_masked(info_maps, &valid)?;
    let cost = if fusion.uses_cost() {
        Some(normalize_corpus_masked(cost_maps, &valid)?)
    } else {
        None
    };
    let fused = info
        .par_iter()
        .enumerate()
        .map(|(k, i)| fuse(i, cost.as_ref().map(|c| &c[k]), fusion))
        .collect::<Result<Vec<_>>>()?;
    let proposals: Vec<RegionProposal<f64>> = fused
        .par_iter()
        .zip(&indices)
        .flat_map_iter(|(f, &i)| nms_per_image(f, pool.regions(i)))
        .collect();
    Ok((select_batch(proposals, budget), fused))
}

/// Accumulated information per image.
pub fn score_images<T: Scalar>(info_maps: &[InformationMap<T>]) -> Vec<(String, T)> {
    info_maps
        .iter()
        .map(|m| (m.image_id.clone(), m.values.iter().copied().sum()))
        .collect()
}

/// The `m` best-scoring images as full-image regions; ties by image id.
pub fn select_images<T: Scalar>(dataset: &Dataset, mut scores: Vec<(String, T)>, m: usize) -> Result<Batch> {
    scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    let mut batch = Batch::default();
    for (id, score) in scores.into_iter().take(m) {
        let img = dataset.image(&id)?;
        batch.push(Region::new(id, Rect::full(img.height(), img.width())), Some(score.to_f64_lossy()));
    }
    Ok(batch)
}

/// `m` untouched images drawn uniformly.
pub fn random_images(pool: &PoolState, dataset: &Dataset, m: usize, rng_seed: u64) -> Batch {
    let mut rng = rng_for(rng_seed, &[purpose::IMAGE_RANDOM, pool.round_index as u64]);
    let mut candidates = pool.untouched_images();
    candidates.shuffle(&mut rng);
    let mut chosen: Vec<usize> = candidates.into_iter().take(m).collect();
    chosen.sort_unstable();
    let mut batch = Batch::default();
    for idx in chosen {
        let img = &dataset.images[idx];
        batch.push(Region::new(img.id.clone(), Rect::full(img.height(), img.width())), None);
    }
    batch
}

/// Uniformly sampled non-overlapping `w x w` regions over all currently valid anchors
/// until the budget admits no further region or no anchor is left.
pub fn random_regions(pool: &PoolState, dataset: &Dataset, w: usize, budget: usize, rng_seed: u64) -> Result<Batch> {
    let mut rng = rng_for(rng_seed, &[purpose::REGION_RANDOM, pool.round_index as u64]);
    let area = w * w;
    let mut blocked: Vec<Option<Array2<bool>>> = Vec::with_capacity(dataset.len());
    let mut candidates: Vec<(u32, u32)> = Vec::new();
    for (idx, img) in dataset.images.iter().enumerate() {
        if w > img.height() || w > img.width() || pool.is_fully_labeled(idx) {
            blocked.push(None);
            continue;
        }
        let valid = valid_anchors(pool.mask_of(idx).0.view(), w)?;
        candidates.extend(
            valid
                .iter()
                .enumerate()
                .filter(|(_, &v)| v)
                .map(|(a, _)| (idx as u32, a as u32)),
        );
        blocked.push(Some(valid.mapv(|v| !v)));
    }

    let mut batch = Batch::default();
    while batch.total_pixels + area <= budget && !candidates.is_empty() {
        let k = rng.random_range(0..candidates.len());
        let (idx, anchor) = candidates.swap_remove(k);
        let map = blocked[idx as usize].as_mut().expect("candidates come from open images");
        let aw = map.ncols();
        let (r, c) = (anchor as usize / aw, anchor as usize % aw);
        if map[(r, c)] {
            continue;
        }
        let (ah, _) = map.dim();
        for rr in r.saturating_sub(w - 1)..(r + w).min(ah) {
            for cc in c.saturating_sub(w - 1)..(c + w).min(aw) {
                map[(rr, cc)] = true;
            }
        }
        let img = &dataset.images[idx as usize];
        batch.push(Region::new(img.id.clone(), Rect::square(r, c, w)), None);
    }
    Ok(batch)
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, PoolState, Rect};
use crate::error::{Error, Result};

/// On-disk form of a [`PoolState`] (`pool_state.json`). Revealed labels are not stored;
/// they are rebuilt from ground truth and the region list on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolCheckpoint {
    pub version: u32,
    pub round_index: usize,
    pub rng_seed: u64,
    pub images: Vec<ImageRegions>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRegions {
    pub image_id: String,
    pub regions: Vec<RegionEntry>,
}

/// Square regions carry `size`; full-image regions of non-square images carry
/// `height` and `width` instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub row: usize,
    pub col: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

impl From<Rect> for RegionEntry {
    fn from(r: Rect) -> Self {
        if r.is_square() {
            RegionEntry {
                row: r.row,
                col: r.col,
                size: Some(r.height),
                height: None,
                width: None,
            }
        } else {
            RegionEntry {
                row: r.row,
                col: r.col,
                size: None,
                height: Some(r.height),
                width: Some(r.width),
            }
        }
    }
}

impl RegionEntry {
    pub fn to_rect(&self) -> Result<Rect> {
        match (self.size, self.height, self.width) {
            (Some(s), None, None) => Ok(Rect::square(self.row, self.col, s)),
            (None, Some(height), Some(width)) => Ok(Rect {
                row: self.row,
                col: self.col,
                height,
                width,
            }),
            _ => Err(Error::Data(format!(
                "region at ({}, {}) needs either size or height+width",
                self.row, self.col
            ))),
        }
    }
}

impl PoolCheckpoint {
    pub fn capture(pool: &PoolState, dataset: &Dataset) -> Self {
        PoolCheckpoint {
            version: 1,
            round_index: pool.round_index,
            rng_seed: pool.rng_seed,
            images: dataset
                .images
                .iter()
                .enumerate()
                .map(|(i, img)| ImageRegions {
                    image_id: img.id.clone(),
                    regions: pool.regions(i).iter().copied().map(RegionEntry::from).collect(),
                })
                .collect(),
        }
    }

    pub fn restore(&self, dataset: &Dataset) -> Result<PoolState> {
        let mut labeled = vec![Vec::new(); dataset.len()];
        for entry in &self.images {
            let idx = dataset.index_of(&entry.image_id)?;
            labeled[idx] = entry.regions.iter().map(RegionEntry::to_rect).collect::<Result<_>>()?;
        }
        PoolState::from_regions(dataset, labeled, self.round_index, self.rng_seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

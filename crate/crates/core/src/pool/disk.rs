//! Dataset directory layout:
//!
//! ```text
//! <root>/dataset.json
//! <root>/<split>/<image_id>/features.dmt
//! <root>/<split>/<image_id>/labels.dmt
//! <root>/<split>/<image_id>/polygons.json
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, ImageRecord, Polygon, SplitDataset};
use crate::error::{Error, Result};
use crate::learners::dmt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub num_classes: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    /// Generator parameters, when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    for img in &dataset.images {
        let img_dir = dir.join(&img.id);
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        dmt::write(&img_dir.join("features.dmt"), img.features.view())?;
        dmt::write_labels(&img_dir.join("labels.dmt"), &img.labels)?;
        let polys = serde_json::to_string(&img.polygons)?;
        let path = img_dir.join("polygons.json");
        fs::write(&path, polys).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path, ids: &[String], num_classes: usize) -> Result<Dataset> {
    let mut images = Vec::with_capacity(ids.len());
    for id in ids {
        let img_dir = dir.join(id);
        let features = dmt::read(&img_dir.join("features.dmt"))?;
        let labels = dmt::read_labels(&img_dir.join("labels.dmt"))?;
        let path = img_dir.join("polygons.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let polygons: Vec<Polygon> = serde_json::from_str(&text)?;
        images.push(ImageRecord {
            id: id.clone(),
            features,
            labels,
            polygons,
        });
    }
    Dataset::new(num_classes, images)
}

pub fn write_split(root: &Path, split: &SplitDataset, generator: Option<serde_json::Value>) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_dataset(&root.join("train"), &split.train)?;
    write_dataset(&root.join("val"), &split.val)?;
    let manifest = DatasetManifest {
        version: 1,
        num_classes: split.train.num_classes,
        train: split.train.images.iter().map(|i| i.id.clone()).collect(),
        val: split.val.images.iter().map(|i| i.id.clone()).collect(),
        generator,
    };
    let path = root.join("dataset.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_split(root: &Path) -> Result<(SplitDataset, DatasetManifest)> {
    let path = root.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let train = load_dataset(&root.join("train"), &manifest.train, manifest.num_classes)?;
    let val = load_dataset(&root.join("val"), &manifest.val, manifest.num_classes)?;
    Ok((SplitDataset { train, val }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::test_support::toy_dataset;

    #[test]
    fn split_round_trips_through_disk() {
        let split = SplitDataset {
            train: toy_dataset(3, 8, 6),
            val: toy_dataset(1, 8, 6),
        };
        let dir = tempfile::tempdir().unwrap();
        write_split(dir.path(), &split, None).unwrap();
        let (back, manifest) = load_split(dir.path()).unwrap();
        assert_eq!(manifest.train.len(), 3);
        assert_eq!(back.train.len(), 3);
        for (a, b) in back.train.images.iter().zip(&split.train.images) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.polygons, b.polygons);
        }
    }

    #[test]
    fn polygons_outside_bounds_are_rejected_on_load() {
        let mut ds = toy_dataset(1, 8, 8);
        ds.images[0].polygons[0].vertices[0] = [9.0, 1.0];
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let err = load_dataset(dir.path(), &["img_000".to_string()], 2);
        assert!(matches!(err, Err(Error::Data(_))));
    }
}

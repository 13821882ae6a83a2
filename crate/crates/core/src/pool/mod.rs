//! Dataset model, region geometry and the labeled/unlabeled pool.

mod checkpoint;
mod disk;

use std::collections::HashMap;

use ndarray::{s, Array2, Array3};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{purpose, rng_for};

pub use checkpoint::PoolCheckpoint;
pub use disk::{load_dataset, load_split, write_dataset, write_split, DatasetManifest};

/// Semantic class index. `UNLABELED` lies outside every valid class range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl ClassId {
    pub const UNLABELED: ClassId = ClassId(u16::MAX);

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn is_labeled(self) -> bool {
        self != Self::UNLABELED
    }
}

/// Closed polygon; the edge from the last vertex back to the first is implicit.
/// Vertices are `[row, col]` in continuous image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub class: ClassId,
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn edges(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }
}

/// Pixel index of a vertex. Vertices on the far image border belong to the last row/column.
pub fn vertex_pixel(v: [f64; 2], height: usize, width: usize) -> (usize, usize) {
    let r = (v[0].floor() as usize).min(height - 1);
    let c = (v[1].floor() as usize).min(width - 1);
    (r, c)
}

/// Axis-aligned pixel rectangle `[row, row + height) x [col, col + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn square(row: usize, col: usize, size: usize) -> Self {
        Rect {
            row,
            col,
            height: size,
            width: size,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Rect {
            row: 0,
            col: 0,
            height,
            width,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn bottom(&self) -> usize {
        self.row + self.height
    }

    pub fn right(&self) -> usize {
        self.col + self.width
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.row < other.bottom()
            && other.row < self.bottom()
            && self.col < other.right()
            && other.col < self.right()
    }

    pub fn intersection_area(&self, other: &Rect) -> usize {
        let h = self.bottom().min(other.bottom()).saturating_sub(self.row.max(other.row));
        let w = self.right().min(other.right()).saturating_sub(self.col.max(other.col));
        h * w
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.height > 0 && self.width > 0 && self.bottom() <= height && self.right() <= width
    }

    pub fn contains_pixel(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.bottom() && c >= self.col && c < self.right()
    }
}

/// A rectangle inside a named image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Region {
    pub image_id: String,
    pub rect: Rect,
}

impl Region {
    pub fn new(image_id: impl Into<String>, rect: Rect) -> Self {
        Region {
            image_id: image_id.into(),
            rect,
        }
    }
}

/// One training or validation image with its hidden ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// `(height, width, channels)`, channel-minor.
    pub features: Array3<f32>,
    pub labels: Array2<ClassId>,
    pub polygons: Vec<Polygon>,
}

impl ImageRecord {
    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn channels(&self) -> usize {
        self.features.dim().2
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn vertex_count(&self) -> usize {
        self.polygons.iter().map(|p| p.vertices.len()).sum()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (h, w, _) = self.features.dim();
        if (h, w) != self.labels.dim() {
            return Err(Error::Data(format!(
                "{}: features are {h}x{w} but labels are {:?}",
                self.id,
                self.labels.dim()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|c| c.index() >= num_classes) {
            return Err(Error::Data(format!("{}: invalid class {}", self.id, bad.0)));
        }
        for poly in &self.polygons {
            if poly.vertices.len() < 3 {
                return Err(Error::Data(format!("{}: polygon with fewer than 3 vertices", self.id)));
            }
            if poly.class.index() >= num_classes {
                return Err(Error::Data(format!("{}: polygon class {} out of range", self.id, poly.class.0)));
            }
            for v in &poly.vertices {
                if !in_bounds(*v, h, w) {
                    return Err(Error::Data(format!("{}: vertex {v:?} outside image", self.id)));
                }
            }
        }
        Ok(())
    }
}

/// Closed image bounds `[0, height] x [0, width]`.
pub fn in_bounds(v: [f64; 2], height: usize, width: usize) -> bool {
    v[0].is_finite()
        && v[1].is_finite()
        && v[0] >= 0.0
        && v[1] >= 0.0
        && v[0] <= height as f64
        && v[1] <= width as f64
}

/// An ordered image collection sharing one class set.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub num_classes: usize,
    pub images: Vec<ImageRecord>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(num_classes: usize, images: Vec<ImageRecord>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        let mut index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            img.validate(num_classes)?;
            if index.insert(img.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate image id {}", img.id)));
            }
        }
        Ok(Dataset {
            num_classes,
            images,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn index_of(&self, image_id: &str) -> Result<usize> {
        self.index
            .get(image_id)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown image id {image_id}")))
    }

    pub fn image(&self, image_id: &str) -> Result<&ImageRecord> {
        Ok(&self.images[self.index_of(image_id)?])
    }

    pub fn total_pixels(&self) -> usize {
        self.images.iter().map(ImageRecord::area).sum()
    }

    pub fn total_vertices(&self) -> usize {
        self.images.iter().map(ImageRecord::vertex_count).sum()
    }
}

/// Training and validation splits.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
}

/// Per-pixel supervision mask, true where a label has been revealed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask(pub Array2<bool>);

impl LabelMask {
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }
}

/// Labeled-region geometry for every image of a dataset plus the labels revealed so far.
///
/// Regions inside an image never overlap, and a pixel is revealed exactly when it lies in
/// one of its image's regions. Mutations return a new state so snapshots can be shared.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolState {
    pub round_index: usize,
    pub rng_seed: u64,
    labeled: Vec<Vec<Rect>>,
    revealed: Vec<Array2<ClassId>>,
}

impl PoolState {
    pub fn empty(dataset: &Dataset, rng_seed: u64) -> Self {
        PoolState {
            round_index: 0,
            rng_seed,
            labeled: vec![Vec::new(); dataset.len()],
            revealed: dataset
                .images
                .iter()
                .map(|img| Array2::from_elem((img.height(), img.width()), ClassId::UNLABELED))
                .collect(),
        }
    }

    pub fn regions(&self, image_index: usize) -> &[Rect] {
        &self.labeled[image_index]
    }

    pub fn revealed(&self, image_index: usize) -> &Array2<ClassId> {
        &self.revealed[image_index]
    }

    pub fn labeled_pixels_in(&self, image_index: usize) -> usize {
        self.labeled[image_index].iter().map(Rect::area).sum()
    }

    pub fn labeled_pixels(&self) -> usize {
        (0..self.labeled.len()).map(|i| self.labeled_pixels_in(i)).sum()
    }

    pub fn num_regions(&self) -> usize {
        self.labeled.iter().map(Vec::len).sum()
    }

    pub fn is_untouched(&self, image_index: usize) -> bool {
        self.labeled[image_index].is_empty()
    }

    pub fn is_fully_labeled(&self, image_index: usize) -> bool {
        let (h, w) = self.revealed[image_index].dim();
        self.labeled_pixels_in(image_index) == h * w
    }

    /// Images that still contain at least one unlabeled pixel.
    pub fn unlabeled_images(&self) -> Vec<usize> {
        (0..self.labeled.len()).filter(|&i| !self.is_fully_labeled(i)).collect()
    }

    pub fn untouched_images(&self) -> Vec<usize> {
        (0..self.labeled.len()).filter(|&i| self.is_untouched(i)).collect()
    }

    pub fn mask_of(&self, image_index: usize) -> LabelMask {
        LabelMask(self.revealed[image_index].mapv(ClassId::is_labeled))
    }

    pub fn label_mask(&self, dataset: &Dataset, image_id: &str) -> Result<LabelMask> {
        Ok(self.mask_of(dataset.index_of(image_id)?))
    }

    /// Returns a state with `answered` committed and the round counter advanced.
    pub fn commit_regions(&self, dataset: &Dataset, answered: &[(Region, Array2<ClassId>)]) -> Result<PoolState> {
        let mut next = self.clone();
        let mut staged: Vec<(usize, Rect)> = Vec::with_capacity(answered.len());
        for (region, patch) in answered {
            let idx = dataset.index_of(&region.image_id)?;
            let img = &dataset.images[idx];
            let rect = region.rect;
            if !rect.fits(img.height(), img.width()) {
                return Err(Error::Invariant(format!(
                    "region {rect:?} does not fit inside {} ({}x{})",
                    region.image_id,
                    img.height(),
                    img.width()
                )));
            }
            if patch.dim() != (rect.height, rect.width) {
                return Err(Error::Data(format!(
                    "label patch is {:?}, region is {}x{}",
                    patch.dim(),
                    rect.height,
                    rect.width
                )));
            }
            let overlaps_existing = self.labeled[idx].iter().any(|r| r.intersects(&rect));
            let overlaps_batch = staged.iter().any(|(j, r)| *j == idx && r.intersects(&rect));
            if overlaps_existing || overlaps_batch {
                return Err(Error::Invariant(format!(
                    "region {rect:?} of {} overlaps a labeled region",
                    region.image_id
                )));
            }
            let gt = img
                .labels
                .slice(s![rect.row..rect.bottom(), rect.col..rect.right()]);
            if gt != patch.view() {
                return Err(Error::Invariant(format!(
                    "revealed patch for {} differs from ground truth",
                    region.image_id
                )));
            }
            staged.push((idx, rect));
        }
        for ((idx, rect), (_, patch)) in staged.into_iter().zip(answered) {
            next.revealed[idx]
                .slice_mut(s![rect.row..rect.bottom(), rect.col..rect.right()])
                .assign(patch);
            next.labeled[idx].push(rect);
        }
        next.round_index += 1;
        Ok(next)
    }

    /// Rebuilds revealed labels from region geometry and ground truth.
    pub(crate) fn from_regions(dataset: &Dataset, labeled: Vec<Vec<Rect>>, round_index: usize, rng_seed: u64) -> Result<Self> {
        let mut state = PoolState::empty(dataset, rng_seed);
        for (idx, rects) in labeled.into_iter().enumerate() {
            let img = &dataset.images[idx];
            for (k, rect) in rects.iter().enumerate() {
                if !rect.fits(img.height(), img.width()) {
                    return Err(Error::Data(format!("checkpoint region {rect:?} outside {}", img.id)));
                }
                if rects[..k].iter().any(|r| r.intersects(rect)) {
                    return Err(Error::Invariant(format!("checkpoint regions overlap in {}", img.id)));
                }
                let window = s![rect.row..rect.bottom(), rect.col..rect.right()];
                state.revealed[idx].slice_mut(window).assign(&img.labels.slice(window));
            }
            state.labeled[idx] = rects;
        }
        state.round_index = round_index;
        Ok(state)
    }
}

/// Labels `n` uniformly chosen images in full, each as one full-image region.
pub fn seed_pool(dataset: &Dataset, n: usize, rng_seed: u64) -> Result<PoolState> {
    if n == 0 || n > dataset.len() {
        return Err(Error::Config(format!(
            "seed size {n} must be in 1..={}",
            dataset.len()
        )));
    }
    let mut rng = rng_for(rng_seed, &[purpose::SEED_POOL]);
    let mut chosen = sample(&mut rng, dataset.len(), n).into_vec();
    chosen.sort_unstable();
    let mut state = PoolState::empty(dataset, rng_seed);
    for idx in chosen {
        let img = &dataset.images[idx];
        state.labeled[idx].push(Rect::full(img.height(), img.width()));
        state.revealed[idx].assign(&img.labels);
    }
    Ok(state)
}

/// Pixel-exact ground-truth patch of a region.
pub fn gt_patch(img: &ImageRecord, rect: Rect) -> Array2<ClassId> {
    img.labels
        .slice(s![rect.row..rect.bottom(), rect.col..rect.right()])
        .to_owned()
}


#[cfg(test)]
mod tests {
    use super::test_support::toy_dataset;
    use super::*;
    use proptest::prelude::*;

    fn answer(ds: &Dataset, id: &str, rect: Rect) -> (Region, Array2<ClassId>) {
        (Region::new(id, rect), gt_patch(ds.image(id).unwrap(), rect))
    }

    #[test]
    fn seed_pool_labels_exactly_n_images() {
        let ds = toy_dataset(60, 8, 8);
        let pool = seed_pool(&ds, 50, 3).unwrap();
        let seeded: Vec<_> = (0..ds.len()).filter(|&i| pool.is_fully_labeled(i)).collect();
        assert_eq!(seeded.len(), 50);
        assert_eq!(pool.labeled_pixels(), 50 * 64);
        assert_eq!(pool.round_index, 0);
        assert_eq!(seed_pool(&ds, 50, 3).unwrap(), pool);
        assert_ne!(seed_pool(&ds, 50, 4).unwrap(), pool);
    }

    #[test]
    fn seeding_everything_exhausts_the_pool() {
        let ds = toy_dataset(5, 8, 8);
        let pool = seed_pool(&ds, 5, 0).unwrap();
        assert!(pool.unlabeled_images().is_empty());
        assert!(pool.revealed.iter().all(|m| m.iter().all(|c| c.is_labeled())));
    }

    #[test]
    fn seed_size_is_validated() {
        let ds = toy_dataset(3, 8, 8);
        assert!(matches!(seed_pool(&ds, 4, 0), Err(Error::Config(_))));
        assert!(matches!(seed_pool(&ds, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn commit_counts_area_and_rejects_overlap() {
        let ds = toy_dataset(2, 256, 256);
        let pool = PoolState::empty(&ds, 0);
        let one = pool
            .commit_regions(&ds, &[answer(&ds, "img_000", Rect::square(0, 0, 128))])
            .unwrap();
        assert_eq!(one.labeled_pixels(), 16384);
        assert_eq!(one.round_index, 1);

        let mask = one.label_mask(&ds, "img_000").unwrap();
        assert_eq!(mask.count() * 4, 256 * 256);
        assert_eq!(one.label_mask(&ds, "img_001").unwrap().count(), 0);

        let two = one
            .commit_regions(
                &ds,
                &[
                    answer(&ds, "img_000", Rect::square(128, 128, 64)),
                    answer(&ds, "img_001", Rect::square(10, 10, 32)),
                ],
            )
            .unwrap();
        assert_eq!(two.labeled_pixels(), 16384 + 4096 + 1024);

        let err = two.commit_regions(&ds, &[answer(&ds, "img_000", Rect::square(100, 100, 32))]);
        assert!(matches!(err, Err(Error::Invariant(_))));
        let err = one.commit_regions(
            &ds,
            &[
                answer(&ds, "img_001", Rect::square(0, 0, 16)),
                answer(&ds, "img_001", Rect::square(8, 8, 16)),
            ],
        );
        assert!(matches!(err, Err(Error::Invariant(_))));
    }

    #[test]
    fn commit_rejects_bad_patches() {
        let ds = toy_dataset(1, 16, 16);
        let pool = PoolState::empty(&ds, 0);
        let wrong_shape = (Region::new("img_000", Rect::square(0, 0, 4)), Array2::from_elem((3, 4), ClassId(0)));
        assert!(matches!(pool.commit_regions(&ds, &[wrong_shape]), Err(Error::Data(_))));
        let mut patch = gt_patch(&ds.images[0], Rect::square(0, 0, 4));
        patch[(0, 0)] = ClassId(1 - patch[(0, 0)].0);
        let wrong_labels = (Region::new("img_000", Rect::square(0, 0, 4)), patch);
        assert!(matches!(pool.commit_regions(&ds, &[wrong_labels]), Err(Error::Invariant(_))));
        assert!(pool.label_mask(&ds, "nope").is_err());
    }

    #[test]
    fn seed_images_have_all_true_masks() {
        let ds = toy_dataset(4, 8, 8);
        let pool = seed_pool(&ds, 1, 9).unwrap();
        for i in 0..ds.len() {
            let m = pool.mask_of(i);
            if pool.is_fully_labeled(i) {
                assert!(m.0.iter().all(|&b| b));
            } else {
                assert_eq!(m.count(), 0);
            }
        }
    }

    proptest! {
        #[test]
        fn pool_accounting_invariants(ops in proptest::collection::vec((0usize..3, 0usize..29, 0usize..29, 1usize..8), 1..40)) {
            let ds = toy_dataset(3, 36, 36);
            let mut pool = seed_pool(&ds, 1, 5).unwrap();
            let mut last = pool.labeled_pixels();
            for (img, r, c, size) in ops {
                let id = ds.images[img].id.clone();
                let rect = Rect::square(r, c, size);
                match pool.commit_regions(&ds, &[answer(&ds, &id, rect)]) {
                    Ok(next) => pool = next,
                    Err(Error::Invariant(_)) => {}
                    Err(e) => panic!("{e}"),
                }
                let revealed: usize = pool.revealed.iter().map(|m| m.iter().filter(|c| c.is_labeled()).count()).sum();
                prop_assert_eq!(revealed, pool.labeled_pixels());
                prop_assert!(pool.labeled_pixels() >= last);
                last = pool.labeled_pixels();
                for rects in &pool.labeled {
                    for (i, a) in rects.iter().enumerate() {
                        for b in &rects[i + 1..] {
                            prop_assert_eq!(a.intersection_area(b), 0);
                        }
                    }
                }
                for (i, img) in ds.images.iter().enumerate() {
                    for (rev, gt) in pool.revealed[i].iter().zip(img.labels.iter()) {
                        prop_assert!(!rev.is_labeled() || rev == gt);
                    }
                }
            }
        }
    }
}

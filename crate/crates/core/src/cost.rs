//! Per-pixel annotation cost in clicks: ground-truth click maps rasterized from polygon
//! vertices, cost-regression targets for the labeled pool, and cost-map prediction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::Learner;
use crate::pool::{in_bounds, vertex_pixel, ClassId, Dataset, ImageRecord, LabelMask, Polygon, PoolState};

/// Per-pixel click totals never exceed this after clipping.
pub const MAX_CLICKS_PER_PIXEL: f64 = 10.0;

/// Clicks attributed to each pixel, clipped to `[0, MAX_CLICKS_PER_PIXEL]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClickMap {
    pub image_id: String,
    pub values: Array2<f64>,
}

/// Predicted clicks per pixel; finite and non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMap {
    pub image_id: String,
    pub values: Array2<f64>,
}

impl CostMap {
    pub fn new(image_id: impl Into<String>, values: Array2<f64>) -> Result<Self> {
        let image_id = image_id.into();
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(format!("{image_id}: cost map must be finite and non-negative")));
        }
        Ok(CostMap { image_id, values })
    }
}

/// Where cost maps come from during acquisition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Rasterized ground-truth clicks.
    #[default]
    Oracle,
    /// The builtin learner's cost regressor.
    Builtin,
    /// The external worker's cost model.
    External,
}

impl std::str::FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(CostMode::Oracle),
            "builtin" => Ok(CostMode::Builtin),
            "external" => Ok(CostMode::External),
            other => Err(Error::Config(format!("unknown cost mode {other}"))),
        }
    }
}

/// Unclipped vertex counts per pixel (vertex at `(r, c)` lands in `(floor r, floor c)`).
pub fn vertex_counts(polygons: &[Polygon], height: usize, width: usize) -> Result<Array2<u32>> {
    let mut counts = Array2::zeros((height, width));
    for v in polygons.iter().flat_map(|p| p.vertices.iter()) {
        if !in_bounds(*v, height, width) {
            return Err(Error::Data(format!("vertex {v:?} outside {height}x{width} image")));
        }
        counts[vertex_pixel(*v, height, width)] += 1;
    }
    Ok(counts)
}

pub fn rasterize_clicks(image_id: &str, polygons: &[Polygon], height: usize, width: usize) -> Result<ClickMap> {
    let counts = vertex_counts(polygons, height, width)?;
    Ok(ClickMap {
        image_id: image_id.to_string(),
        values: counts.mapv(|n| f64::from(n).min(MAX_CLICKS_PER_PIXEL)),
    })
}

pub fn image_clicks(image: &ImageRecord) -> Result<ClickMap> {
    rasterize_clicks(&image.id, &image.polygons, image.height(), image.width())
}

/// Spreads clicks evenly over `factor x factor` blocks, keeping per-block totals.
pub fn downscale_targets(values: &Array2<f64>, factor: usize) -> Array2<f64> {
    if factor <= 1 {
        return values.clone();
    }
    let (h, w) = values.dim();
    let mut out = Array2::zeros((h, w));
    for br in (0..h).step_by(factor) {
        for bc in (0..w).step_by(factor) {
            let (r1, c1) = ((br + factor).min(h), (bc + factor).min(w));
            let mut sum = 0.0;
            for r in br..r1 {
                for c in bc..c1 {
                    sum += values[(r, c)];
                }
            }
            let mean = sum / ((r1 - br) * (c1 - bc)) as f64;
            for r in br..r1 {
                for c in bc..c1 {
                    out[(r, c)] = mean;
                }
            }
        }
    }
    out
}

/// Masked regression target for one partially or fully labeled image.
#[derive(Clone, Debug)]
pub struct CostTarget {
    pub image_index: usize,
    pub image_id: String,
    /// Click targets, zero wherever `mask` is false.
    pub clicks: Array2<f64>,
    pub mask: LabelMask,
}

/// Click targets for every labeled pixel of the pool.
pub fn cost_training_targets(pool: &PoolState, dataset: &Dataset, downscale: usize) -> Result<Vec<CostTarget>> {
    if pool.labeled_pixels() == 0 {
        return Err(Error::State("cost targets need at least one labeled region".into()));
    }
    let mut targets = Vec::new();
    for (idx, image) in dataset.images.iter().enumerate() {
        if pool.is_untouched(idx) {
            continue;
        }
        let mask = pool.mask_of(idx);
        let mut clicks = downscale_targets(&image_clicks(image)?.values, downscale);
        ndarray::Zip::from(&mut clicks).and(&mask.0).for_each(|v, &m| {
            if !m {
                *v = 0.0;
            }
        });
        targets.push(CostTarget {
            image_index: idx,
            image_id: image.id.clone(),
            clicks,
            mask,
        });
    }
    Ok(targets)
}

/// Fraction of the (up to 8) neighbours whose predicted class differs from the centre.
pub fn boundary_density(argmax: &Array2<ClassId>) -> Array2<f64> {
    let (h, w) = argmax.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let centre = argmax[(r, c)];
        let mut total = 0u32;
        let mut differ = 0u32;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                    continue;
                }
                total += 1;
                if argmax[(rr as usize, cc as usize)] != centre {
                    differ += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            f64::from(differ) / f64::from(total)
        }
    })
}

/// Cost map for one image under the selected mode.
pub fn predict_cost_map(mode: CostMode, learner: &dyn Learner, image: &ImageRecord) -> Result<CostMap> {
    match mode {
        CostMode::Oracle => {
            let clicks = image_clicks(image)?;
            CostMap::new(clicks.image_id, clicks.values)
        }
        CostMode::Builtin | CostMode::External => learner.predict_cost(image),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::test_support::toy_dataset;
    use crate::pool::{gt_patch, seed_pool, Rect, Region};
    use ndarray::array;

    fn poly(vertices: Vec<[f64; 2]>) -> Polygon {
        Polygon {
            class: ClassId(0),
            vertices,
        }
    }

    #[test]
    fn triangle_costs_three_clicks() {
        let m = rasterize_clicks("x", &[poly(vec![[0.5, 0.5], [3.2, 1.9], [1.0, 3.99]])], 4, 4).unwrap();
        assert_eq!(m.values.sum(), 3.0);
        assert_eq!(m.values[(3, 1)], 1.0);
    }

    #[test]
    fn distinct_pixels_and_clipping() {
        let twelve: Vec<[f64; 2]> = (0..12).map(|i| [i as f64 + 0.5, 0.5]).collect();
        let m = rasterize_clicks("x", &[poly(twelve)], 12, 2).unwrap();
        assert_eq!(m.values.iter().filter(|&&v| v == 1.0).count(), 12);

        let eleven = vec![[2.25, 2.75]; 11];
        let m = rasterize_clicks("x", &[poly(eleven)], 4, 4).unwrap();
        assert_eq!(m.values[(2, 2)], 10.0);
        assert_eq!(vertex_counts(&[poly(vec![[2.25, 2.75]; 11])], 4, 4).unwrap()[(2, 2)], 11);
    }

    #[test]
    fn far_border_vertices_attach_to_last_pixel() {
        let m = rasterize_clicks("x", &[poly(vec![[0.0, 0.0], [0.0, 4.0], [4.0, 4.0]])], 4, 4).unwrap();
        assert_eq!(m.values[(0, 3)], 1.0);
        assert_eq!(m.values[(3, 3)], 1.0);
        assert!(rasterize_clicks("x", &[poly(vec![[0.0, 0.0], [0.0, 4.5], [1.0, 1.0]])], 4, 4).is_err());
    }

    #[test]
    fn targets_cover_exactly_the_labeled_pixels() {
        let ds = toy_dataset(4, 16, 16);
        let empty = PoolState::empty(&ds, 0);
        assert!(matches!(cost_training_targets(&empty, &ds, 1), Err(Error::State(_))));

        let pool = seed_pool(&ds, 2, 1).unwrap();
        let targets = cost_training_targets(&pool, &ds, 1).unwrap();
        assert_eq!(targets.len(), 2);
        assert!(targets.iter().all(|t| t.mask.count() == 256));

        let idx = (0..4).find(|&i| pool.is_untouched(i)).unwrap();
        let rect = Rect::square(0, 0, 4);
        let img = &ds.images[idx];
        let pool = pool
            .commit_regions(&ds, &[(Region::new(img.id.clone(), rect), gt_patch(img, rect))])
            .unwrap();
        let targets = cost_training_targets(&pool, &ds, 1).unwrap();
        assert_eq!(targets.len(), 3);
        let t = targets.iter().find(|t| t.image_index == idx).unwrap();
        assert_eq!(t.mask.count(), 16);
        assert!(t.clicks.indexed_iter().all(|(p, &v)| t.mask.0[p] || v == 0.0));
        // the triangle's first vertex (0.5, 0.5) is inside the region
        assert_eq!(t.clicks[(0, 0)], 1.0);
    }

    #[test]
    fn downscaling_preserves_block_totals() {
        let v = array![[4.0, 0.0, 1.0], [0.0, 0.0, 1.0], [2.0, 0.0, 0.0]];
        let d = downscale_targets(&v, 2);
        assert_eq!(d[(0, 0)], 1.0);
        assert_eq!(d[(1, 2)], 1.0);
        assert_eq!(d[(2, 0)], 1.0);
        assert!((d.sum() - v.sum()).abs() < 1e-12);
    }

    #[test]
    fn boundary_density_counts_disagreeing_neighbours() {
        let a = array![[ClassId(0), ClassId(0)], [ClassId(0), ClassId(1)]];
        let d = boundary_density(&a);
        assert!((d[(0, 0)] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(d[(1, 1)], 1.0);
        let flat = Array2::from_elem((3, 3), ClassId(2));
        assert!(boundary_density(&flat).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cost_maps_reject_negative_values() {
        assert!(CostMap::new("x", array![[0.0, -1.0]]).is_err());
        assert!(CostMap::new("x", array![[0.0, 0.0]]).is_ok());
    }
}

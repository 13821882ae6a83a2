//! Sliding-window region scoring: box-sum aggregation through a summed-area table,
//! corpus-wide min-max normalization, information/cost fusion and greedy
//! non-overlapping region selection.
//!
//! Region maps only hold anchors whose `w x w` window lies fully inside the image,
//! so a map for an `H x W` image is `(H - w + 1) x (W - w + 1)`.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::{Rect, Region};
use crate::scalar::Scalar;

/// Box sums of a per-pixel map at every valid `window x window` anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMap<T> {
    pub image_id: String,
    pub window: usize,
    pub values: Array2<T>,
}

impl<T: Scalar> RegionMap<T> {
    /// Aggregates `map` for `image_id`.
    pub fn aggregate(image_id: impl Into<String>, map: ArrayView2<'_, T>, window: usize) -> Result<Self> {
        Ok(RegionMap {
            image_id: image_id.into(),
            window,
            values: box_aggregate(map, window)?,
        })
    }

    /// Dimensions of the source image.
    pub fn image_shape(&self) -> (usize, usize) {
        let (ah, aw) = self.values.dim();
        (ah + self.window - 1, aw + self.window - 1)
    }
}

/// Region map rescaled into `[0, 1]` with corpus-wide statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedRegionMap<T>(RegionMap<T>);

impl<T> NormalizedRegionMap<T> {
    pub fn as_map(&self) -> &RegionMap<T> {
        &self.0
    }

    pub fn into_map(self) -> RegionMap<T> {
        self.0
    }
}

/// Summed-area table with a zero top row and left column: `(H + 1) x (W + 1)`.
pub fn integral_image<T: Scalar>(map: ArrayView2<'_, T>) -> Array2<T> {
    let (h, w) = map.dim();
    let mut sat = Array2::from_elem((h + 1, w + 1), T::zero());
    for r in 0..h {
        let mut row_sum = T::zero();
        for c in 0..w {
            row_sum += map[(r, c)];
            sat[(r + 1, c + 1)] = sat[(r, c + 1)] + row_sum;
        }
    }
    sat
}

/// Sum of the source map over `rect`, read from a summed-area table.
pub fn rect_sum<T: Scalar>(sat: &Array2<T>, rect: Rect) -> T {
    let (r0, c0, r1, c1) = (rect.row, rect.col, rect.bottom(), rect.right());
    sat[(r1, c1)] - sat[(r0, c1)] - sat[(r1, c0)] + sat[(r0, c0)]
}

/// Mean over the `(2r+1)^2` window clipped to the image.
pub fn box_mean(plane: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let sat = integral_image(plane.view());
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (r0, c0) = (r.saturating_sub(radius), c.saturating_sub(radius));
        let (r1, c1) = ((r + radius + 1).min(h), (c + radius + 1).min(w));
        let rect = Rect {
            row: r0,
            col: c0,
            height: r1 - r0,
            width: c1 - c0,
        };
        rect_sum(&sat, rect) / rect.area() as f64
    })
}

/// Exact `w x w` window sums at every valid anchor in O(HW).
pub fn box_aggregate<T: Scalar>(map: ArrayView2<'_, T>, w: usize) -> Result<Array2<T>> {
    let (h, width) = map.dim();
    if w == 0 || w > h || w > width {
        return Err(Error::Config(format!(
            "window {w} does not fit a {h}x{width} map"
        )));
    }
    let sat = integral_image(map);
    Ok(Array2::from_shape_fn((h - w + 1, width - w + 1), |(r, c)| {
        rect_sum(&sat, Rect::square(r, c, w))
    }))
}

/// Anchors whose window does not touch any labeled pixel.
pub fn valid_anchors(mask: ArrayView2<'_, bool>, w: usize) -> Result<Array2<bool>> {
    let counts = box_aggregate(mask.mapv(|m| if m { 1.0f64 } else { 0.0 }).view(), w)?;
    Ok(counts.mapv(|v| v == 0.0))
}

fn min_max<T: Scalar>(maps: &[RegionMap<T>], valid: Option<&[Array2<bool>]>) -> Option<(T, T)> {
    maps.par_iter()
        .enumerate()
        .filter_map(|(i, m)| {
            let mut acc: Option<(T, T)> = None;
            for (idx, &v) in m.values.indexed_iter() {
                if valid.is_some_and(|vm| !vm[i][idx]) {
                    continue;
                }
                acc = Some(match acc {
                    None => (v, v),
                    Some((lo, hi)) => (lo.min(v), hi.max(v)),
                });
            }
            acc
        })
        .reduce_with(|(a, b), (c, d)| (a.min(c), b.max(d)))
}

fn rescale<T: Scalar>(maps: Vec<RegionMap<T>>, stats: Option<(T, T)>) -> Vec<NormalizedRegionMap<T>> {
    maps.into_iter()
        .map(|mut m| {
            match stats {
                Some((lo, hi)) if hi > lo => {
                    let span = hi - lo;
                    m.values
                        .mapv_inplace(|v| ((v - lo) / span).max(T::zero()).min(T::one()));
                }
                _ => m.values.fill(T::zero()),
            }
            NormalizedRegionMap(m)
        })
        .collect()
}

/// `x -> (x - min) / (max - min)` with min and max taken over every anchor of every map.
/// A constant corpus maps to all zeros.
pub fn normalize_corpus<T: Scalar>(maps: Vec<RegionMap<T>>) -> Vec<NormalizedRegionMap<T>> {
    let stats = min_max(&maps, None);
    rescale(maps, stats)
}

/// As [`normalize_corpus`], but statistics only see anchors flagged in `valid`; other
/// anchors are clamped into `[0, 1]`.
pub fn normalize_corpus_masked<T: Scalar>(
    maps: Vec<RegionMap<T>>,
    valid: &[Array2<bool>],
) -> Result<Vec<NormalizedRegionMap<T>>> {
    if valid.len() != maps.len() || maps.iter().zip(valid).any(|(m, v)| m.values.dim() != v.dim()) {
        return Err(Error::Data("validity masks do not match the region maps".into()));
    }
    let stats = min_max(&maps, Some(valid));
    Ok(rescale(maps, stats))
}

/// Information/cost fusion function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fusion {
    /// `I`
    InfoOnly,
    /// `I / (1 + C)`
    G1,
    /// `(1 - C) * I`
    G2,
    /// `alpha * I + (1 - alpha) * (1 - C)`
    G3 { alpha: f64 },
}

impl Default for Fusion {
    fn default() -> Self {
        Fusion::InfoOnly
    }
}

impl Fusion {
    pub fn uses_cost(&self) -> bool {
        !matches!(self, Fusion::InfoOnly)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Fusion::G3 { alpha } if !(0.0..=1.0).contains(alpha) => {
                Err(Error::Config(format!("alpha {alpha} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn apply<T: Scalar>(&self, info: T, cost: T) -> T {
        let one = T::one();
        match *self {
            Fusion::InfoOnly => info,
            Fusion::G1 => info / (one + cost),
            Fusion::G2 => (one - cost) * info,
            Fusion::G3 { alpha } => {
                let a = T::of(alpha);
                info * a + (one - cost) * (one - a)
            }
        }
    }
}

/// Fuses normalized region information and cost maps.
pub fn fuse<T: Scalar>(
    info: &NormalizedRegionMap<T>,
    cost: Option<&NormalizedRegionMap<T>>,
    fusion: Fusion,
) -> Result<RegionMap<T>> {
    fusion.validate()?;
    let info = &info.0;
    let values = match (fusion, cost) {
        (Fusion::InfoOnly, _) => info.values.clone(),
        (_, None) => return Err(Error::Config(format!("{fusion:?} requires a cost map"))),
        (_, Some(cost)) => {
            if cost.0.values.dim() != info.values.dim() {
                return Err(Error::Data(format!(
                    "information map {:?} and cost map {:?} differ in shape",
                    info.values.dim(),
                    cost.0.values.dim()
                )));
            }
            Zip::from(&info.values)
                .and(&cost.0.values)
                .map_collect(|&i, &c| fusion.apply(i, c))
        }
    };
    Ok(RegionMap {
        image_id: info.image_id.clone(),
        window: info.window,
        values,
    })
}

/// Candidate region with its fused score.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionProposal<T> {
    pub region: Region,
    pub score: T,
}

/// Marks every anchor whose window intersects `rect`.
fn block(blocked: &mut Array2<bool>, rect: Rect, w: usize) {
    let (ah, aw) = blocked.dim();
    let r0 = rect.row.saturating_sub(w - 1);
    let c0 = rect.col.saturating_sub(w - 1);
    let r1 = rect.bottom().min(ah);
    let c1 = rect.right().min(aw);
    for r in r0..r1 {
        for c in c0..c1 {
            blocked[(r, c)] = true;
        }
    }
}

/// Greedy non-maximum suppression until maximum coverage.
///
/// Repeatedly takes the best-scoring anchor whose window overlaps neither an earlier pick
/// nor an `excluded` rectangle; ties go to the lexicographically smallest `(row, col)`.
/// Non-finite scores are never selected.
pub fn nms_per_image<T: Scalar>(fused: &RegionMap<T>, excluded: &[Rect]) -> Vec<RegionProposal<T>> {
    let w = fused.window;
    let (ah, aw) = fused.values.dim();
    let mut blocked = Array2::from_elem((ah, aw), false);
    for rect in excluded {
        block(&mut blocked, *rect, w);
    }
    let mut order: Vec<(usize, T)> = fused
        .values
        .iter()
        .enumerate()
        .filter(|(i, v)| v.is_finite() && !blocked[(i / aw, i % aw)])
        .map(|(i, &v)| (i, v))
        .collect();
    order.sort_unstable_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));

    let mut picks = Vec::new();
    for (i, score) in order {
        let (r, c) = (i / aw, i % aw);
        if blocked[(r, c)] {
            continue;
        }
        let rect = Rect::square(r, c, w);
        block(&mut blocked, rect, w);
        picks.push(RegionProposal {
            region: Region::new(fused.image_id.clone(), rect),
            score,
        });
    }
    picks
}

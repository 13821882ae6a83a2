//! Simulated annotator: reveals ground truth for a queried region and accounts for the
//! clicks a polygon annotator would spend on it.
//!
//! Interior clicks are the polygon vertices whose containing pixel lies in the region.
//! Border clicks are the points where a polygon edge enters or leaves the closed region
//! rectangle, one click each; they are computed in exact rational arithmetic.

use ndarray::Array2;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::{gt_patch, vertex_pixel, ClassId, ImageRecord, Polygon, Rect, Region};

/// Labels and effort for one annotated region.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationReceipt {
    pub region: Region,
    pub labels: Array2<ClassId>,
    pub clicks_interior: u64,
    pub clicks_border: u64,
}

impl AnnotationReceipt {
    pub fn clicks(&self) -> u64 {
        self.clicks_interior + self.clicks_border
    }
}

/// Effort totals without the label patch, for ledgers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickCount {
    pub interior: u64,
    pub border: u64,
}

impl ClickCount {
    pub fn total(&self) -> u64 {
        self.interior + self.border
    }
}

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).expect("polygon coordinates are finite")
}

fn int(v: usize) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

/// Number of times the segment `p -> q` enters or leaves the closed rectangle `rect`.
///
/// A segment that only touches the rectangle in a single point does not cross it.
pub fn edge_crossings(p: [f64; 2], q: [f64; 2], rect: Rect) -> u32 {
    let (r0, r1) = (rect.row as f64, rect.bottom() as f64);
    let (c0, c1) = (rect.col as f64, rect.right() as f64);
    let inside = |v: [f64; 2]| v[0] >= r0 && v[0] <= r1 && v[1] >= c0 && v[1] <= c1;
    if inside(p) && inside(q) {
        return 0;
    }
    if p[0].max(q[0]) < r0 || p[0].min(q[0]) > r1 || p[1].max(q[1]) < c0 || p[1].min(q[1]) > c1 {
        return 0;
    }

    let mut lo = BigRational::zero();
    let mut hi = BigRational::one();
    let bounds = [
        (p[0], q[0], rect.row, rect.bottom()),
        (p[1], q[1], rect.col, rect.right()),
    ];
    for (start, end, min, max) in bounds {
        let start = exact(start);
        let delta = exact(end) - &start;
        let (min, max) = (int(min), int(max));
        if delta.is_zero() {
            if start < min || start > max {
                return 0;
            }
            continue;
        }
        let ta = (&min - &start) / &delta;
        let tb = (&max - &start) / &delta;
        let (tmin, tmax) = if ta <= tb { (ta, tb) } else { (tb, ta) };
        if tmin > lo {
            lo = tmin;
        }
        if tmax < hi {
            hi = tmax;
        }
    }
    if lo >= hi {
        return 0;
    }
    u32::from(lo > BigRational::zero()) + u32::from(hi < BigRational::one())
}

/// Border clicks induced by cutting `polygons` with `rect`.
pub fn border_clicks(polygons: &[Polygon], rect: Rect) -> u64 {
    polygons
        .iter()
        .flat_map(Polygon::edges)
        .map(|(p, q)| u64::from(edge_crossings(p, q, rect)))
        .sum()
}

/// Vertices attributed to a pixel inside `rect`.
pub fn interior_clicks(image: &ImageRecord, rect: Rect) -> u64 {
    let (h, w) = (image.height(), image.width());
    image
        .polygons
        .iter()
        .flat_map(|p| p.vertices.iter())
        .filter(|v| {
            let (r, c) = vertex_pixel(**v, h, w);
            rect.contains_pixel(r, c)
        })
        .count() as u64
}

pub fn click_count(image: &ImageRecord, rect: Rect) -> ClickCount {
    ClickCount {
        interior: interior_clicks(image, rect),
        border: border_clicks(&image.polygons, rect),
    }
}

/// Ground-truth click cost of a region, without revealing labels.
pub fn region_cost_gt(region: &Region, image: &ImageRecord) -> u64 {
    click_count(image, region.rect).total()
}

/// Reveals the ground truth of `region`. `labeled` holds the image's labeled rectangles.
pub fn annotate(region: &Region, image: &ImageRecord, labeled: &[Rect]) -> Result<AnnotationReceipt> {
    if region.image_id != image.id {
        return Err(Error::Data(format!(
            "region targets {} but image is {}",
            region.image_id, image.id
        )));
    }
    let rect = region.rect;
    if !rect.fits(image.height(), image.width()) {
        return Err(Error::Invariant(format!("region {rect:?} outside {}", image.id)));
    }
    if labeled.iter().any(|r| r.intersects(&rect)) {
        return Err(Error::Invariant(format!(
            "region {rect:?} of {} overlaps labeled pixels",
            image.id
        )));
    }
    let clicks = click_count(image, rect);
    Ok(AnnotationReceipt {
        region: region.clone(),
        labels: gt_patch(image, rect),
        clicks_interior: clicks.interior,
        clicks_border: clicks.border,
    })
}

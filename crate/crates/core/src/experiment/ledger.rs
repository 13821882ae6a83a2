//! Per-round JSON-lines ledgers and their reconciliation.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::curves::ALCurve;
use crate::acquisition::Batch;
use crate::error::{Error, Result};
use crate::oracle::{annotate, AnnotationReceipt};
use crate::pool::{ClassId, Dataset, PoolState, Rect, Region};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegionRecord {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl RegionRecord {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

impl From<&Region> for RegionRecord {
    fn from(r: &Region) -> Self {
        RegionRecord {
            image_id: r.image_id.clone(),
            row: r.rect.row,
            col: r.rect.col,
            height: r.rect.height,
            width: r.rect.width,
        }
    }
}

impl From<&RegionRecord> for Region {
    fn from(r: &RegionRecord) -> Self {
        Region::new(
            r.image_id.clone(),
            Rect {
                row: r.row,
                col: r.col,
                height: r.height,
                width: r.width,
            },
        )
    }
}

/// One committed batch. Round 0 is the seed set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionRecord {
    pub round: usize,
    pub strategy: String,
    pub regions: Vec<RegionRecord>,
    pub scores: Vec<Option<f64>>,
    pub total_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiptRecord {
    pub round: usize,
    #[serde(flatten)]
    pub region: RegionRecord,
    pub clicks_interior: u64,
    pub clicks_border: u64,
}

impl ReceiptRecord {
    pub fn from_receipt(round: usize, receipt: &AnnotationReceipt) -> Self {
        ReceiptRecord {
            round,
            region: RegionRecord::from(&receipt.region),
            clicks_interior: receipt.clicks_interior,
            clicks_border: receipt.clicks_border,
        }
    }

    pub fn clicks(&self) -> u64 {
        self.clicks_interior + self.clicks_border
    }
}

/// Labels and ledger records for one batch.
#[derive(Clone, Debug)]
pub struct AnnotatedBatch {
    pub acquisition: AcquisitionRecord,
    pub receipts: Vec<ReceiptRecord>,
    /// Revealed ground truth, ready for [`PoolState::commit_regions`].
    pub answered: Vec<(Region, Array2<ClassId>)>,
}

/// Annotates `batch` against the pool it is about to join.
pub fn annotate_batch(
    round: usize,
    strategy: &str,
    batch: &Batch,
    dataset: &Dataset,
    pool: &PoolState,
) -> Result<AnnotatedBatch> {
    let annotated = batch
        .regions
        .par_iter()
        .map(|r| {
            let idx = dataset.index_of(&r.image_id)?;
            annotate(r, &dataset.images[idx], pool.regions(idx))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnnotatedBatch {
        acquisition: AcquisitionRecord {
            round,
            strategy: strategy.to_string(),
            regions: batch.regions.iter().map(RegionRecord::from).collect(),
            scores: batch.scores.clone(),
            total_pixels: batch.total_pixels,
        },
        receipts: annotated.iter().map(|a| ReceiptRecord::from_receipt(round, a)).collect(),
        answered: annotated.into_iter().map(|a| (a.region, a.labels)).collect(),
    })
}

pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let _ = std::fs::remove_file(path);
    append_jsonl(path, records)
}

/// Pixels and clicks committed in one round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundTotals {
    pub round: usize,
    pub pixels: usize,
    pub clicks: u64,
}

/// Checks that both ledgers describe the same regions round by round and returns the
/// per-round totals in round order.
pub fn reconcile(acquisitions: &[AcquisitionRecord], receipts: &[ReceiptRecord]) -> Result<Vec<RoundTotals>> {
    let mut by_round: BTreeMap<usize, Vec<&ReceiptRecord>> = BTreeMap::new();
    for r in receipts {
        by_round.entry(r.round).or_default().push(r);
    }
    let mut totals = Vec::with_capacity(acquisitions.len());
    let mut seen = std::collections::BTreeSet::new();
    for a in acquisitions {
        if !seen.insert(a.round) {
            return Err(Error::Invariant(format!("round {} logged twice", a.round)));
        }
        if a.scores.len() != a.regions.len() {
            return Err(Error::Invariant(format!("round {}: scores and regions differ in length", a.round)));
        }
        let area: usize = a.regions.iter().map(RegionRecord::area).sum();
        if area != a.total_pixels {
            return Err(Error::Invariant(format!(
                "round {}: total_pixels {} but regions cover {area}",
                a.round, a.total_pixels
            )));
        }
        let got = by_round.remove(&a.round).unwrap_or_default();
        let mut lhs: Vec<&RegionRecord> = a.regions.iter().collect();
        let mut rhs: Vec<&RegionRecord> = got.iter().map(|r| &r.region).collect();
        lhs.sort();
        rhs.sort();
        if lhs != rhs {
            return Err(Error::Invariant(format!(
                "round {}: acquisitions and receipts list different regions",
                a.round
            )));
        }
        totals.push(RoundTotals {
            round: a.round,
            pixels: area,
            clicks: got.iter().map(|r| r.clicks()).sum(),
        });
    }
    if let Some(round) = by_round.keys().next() {
        return Err(Error::Invariant(format!("receipts for round {round} have no acquisition")));
    }
    Ok(totals)
}

/// Checks the curve's cumulative fractions against ledger totals.
pub fn check_curve(curve: &ALCurve, totals: &[RoundTotals], total_pixels: usize, total_vertices: usize) -> Result<()> {
    for p in &curve.points {
        let upto = totals.iter().filter(|t| t.round <= p.round);
        let (pixels, clicks) = upto.fold((0usize, 0u64), |(px, cl), t| (px + t.pixels, cl + t.clicks));
        let pixel_frac = pixels as f64 / total_pixels as f64;
        let click_frac = clicks as f64 / total_vertices as f64;
        if (pixel_frac - p.pixel_frac).abs() > 1e-12 || (click_frac - p.click_frac).abs() > 1e-12 {
            return Err(Error::Invariant(format!(
                "round {}: curve reports ({}, {}) but ledgers give ({pixel_frac}, {click_frac})",
                p.round, p.pixel_frac, p.click_frac
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(id: &str, row: usize) -> RegionRecord {
        RegionRecord {
            image_id: id.into(),
            row,
            col: 0,
            height: 2,
            width: 2,
        }
    }

    fn acq(round: usize, regions: Vec<RegionRecord>) -> AcquisitionRecord {
        AcquisitionRecord {
            round,
            strategy: "x".into(),
            total_pixels: regions.iter().map(RegionRecord::area).sum(),
            scores: vec![None; regions.len()],
            regions,
        }
    }

    fn rec(round: usize, region: RegionRecord, clicks: u64) -> ReceiptRecord {
        ReceiptRecord {
            round,
            region,
            clicks_interior: clicks,
            clicks_border: 1,
        }
    }

    #[test]
    fn consistent_ledgers_reconcile() {
        let a = vec![acq(0, vec![region("a", 0)]), acq(1, vec![region("a", 2), region("b", 0)])];
        let r = vec![
            rec(0, region("a", 0), 3),
            rec(1, region("b", 0), 0),
            rec(1, region("a", 2), 2),
        ];
        let t = reconcile(&a, &r).unwrap();
        assert_eq!(t[1], RoundTotals { round: 1, pixels: 8, clicks: 4 });
    }

    #[test]
    fn mismatches_are_reported() {
        let a = vec![acq(0, vec![region("a", 0)])];
        assert!(reconcile(&a, &[rec(0, region("a", 1), 0)]).is_err());
        assert!(reconcile(&a, &[rec(0, region("a", 0), 0), rec(1, region("a", 2), 0)]).is_err());
        let mut bad = a.clone();
        bad[0].total_pixels += 1;
        assert!(reconcile(&bad, &[rec(0, region("a", 0), 0)]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let records = vec![rec(0, region("a", 0), 3), rec(1, region("b", 2), 0)];
        append_jsonl(&p, &records[..1]).unwrap();
        append_jsonl(&p, &records[1..]).unwrap();
        assert_eq!(read_jsonl::<ReceiptRecord>(&p).unwrap(), records);
        let line = std::fs::read_to_string(&p).unwrap();
        assert!(line.starts_with(r#"{"round":0,"image_id":"a","row":0"#));
    }
}

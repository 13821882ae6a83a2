//! The outer active-learning loop, the full-data reference run and result files.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, LearnerConfig};
use super::curves::{average_curves, performance_index, render_svg, ALCurve, CurvePoint, PerformanceIndex};
use super::ledger::{
    annotate_batch, append_jsonl, read_jsonl, reconcile, write_jsonl, AcquisitionRecord, AnnotatedBatch, ReceiptRecord,
};
use crate::acquisition::{
    pixel_budget, random_images, random_regions, score_images, select_images, select_scored_regions, Batch, Measure,
    PixelMaps, Strategy,
};
use crate::cost::{cost_training_targets, image_clicks, predict_cost_map};
use crate::error::{Error, Result};
use crate::info::{entropy_map, vote_entropy_map, InformationMap};
use crate::learners::{
    dmt, BuiltinLearner, CostJob, CostSample, ExternalLearner, LearnerHandle, LearnerKind, SegJob, SegSample,
    TrainReport,
};
use crate::metrics::compute_miou;
use crate::pool::PoolCheckpoint;
use crate::pool::{seed_pool, ClassId, Dataset, ImageRecord, LabelMask, PoolState, Rect, Region, SplitDataset};
use crate::seeding::{derive_seed, hash_str, purpose};

/// Output and debugging switches for [`run_experiment`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Results directory; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Continue repetitions from their last checkpoint.
    pub resume: bool,
    pub dump_info_maps: Option<PathBuf>,
    pub dump_cost_maps: Option<PathBuf>,
    pub dump_region_maps: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceResult {
    pub fingerprint: String,
    pub p100_miou: f64,
    pub report: TrainReport,
    #[serde(skip)]
    pub cached: bool,
}

#[derive(Clone, Debug)]
pub struct RepetitionResult {
    pub index: usize,
    pub seed: u64,
    pub curve: ALCurve,
    pub acquisitions: Vec<AcquisitionRecord>,
    pub receipts: Vec<ReceiptRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub p100_miou: f64,
    pub index: PerformanceIndex,
    pub repetitions: Vec<PerformanceIndex>,
    pub rounds: usize,
    pub total_pixels: usize,
    pub total_vertices: usize,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub repetitions: Vec<RepetitionResult>,
    pub mean: ALCurve,
    pub summary: Summary,
}

/// Loads `config.data_dir` or generates the configured synthetic dataset.
pub fn load_data(config: &ExperimentConfig) -> Result<SplitDataset> {
    let data = match &config.data_dir {
        Some(dir) => crate::pool::load_split(dir)?.0,
        None => super::generator::generate(&config.dataset)?,
    };
    let first = data
        .train
        .images
        .first()
        .ok_or_else(|| Error::Config("training split is empty".into()))?;
    config.validate_against(data.train.len(), first.height(), first.width())?;
    Ok(data)
}

/// Short human-readable name of the acquisition setup.
pub fn label(config: &ExperimentConfig) -> String {
    let a = &config.acquisition;
    let strategy = serde_json::to_value(a.strategy).unwrap();
    let mut parts = vec![strategy.as_str().unwrap_or("?").to_string()];
    if a.strategy.is_scored() {
        parts.push(serde_json::to_value(a.measure).unwrap().as_str().unwrap_or("?").to_string());
    }
    if a.strategy.is_region() {
        parts.push(format!("w{}", a.region_size.unwrap_or(0)));
        if a.strategy.is_scored() && a.fusion.uses_cost() {
            let fusion = serde_json::to_value(a.fusion).unwrap();
            let mut name = fusion["kind"].as_str().unwrap_or("?").to_string();
            if let Some(alpha) = fusion.get("alpha") {
                name.push_str(&format!("a{alpha}"));
            }
            parts.push(name);
            parts.push(serde_json::to_value(config.cost_mode).unwrap().as_str().unwrap_or("?").to_string());
        }
    }
    parts.join("/")
}

fn hash_image(h: &mut Sha256, img: &ImageRecord) {
    h.update(img.id.as_bytes());
    let (r, c, f) = img.features.dim();
    for d in [r, c, f] {
        h.update((d as u64).to_le_bytes());
    }
    for v in img.features.iter() {
        h.update(v.to_le_bytes());
    }
    for l in img.labels.iter() {
        h.update(l.0.to_le_bytes());
    }
    for p in &img.polygons {
        h.update(p.class.0.to_le_bytes());
        for v in &p.vertices {
            h.update(v[0].to_le_bytes());
            h.update(v[1].to_le_bytes());
        }
    }
}

/// Content hash of both splits.
pub fn dataset_fingerprint(data: &SplitDataset) -> String {
    let mut h = Sha256::new();
    h.update((data.train.num_classes as u64).to_le_bytes());
    for (tag, split) in [(b"train", &data.train), (b"valid", &data.val)] {
        h.update(tag);
        for img in &split.images {
            hash_image(&mut h, img);
        }
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn reference_fingerprint(config: &ExperimentConfig, data: &SplitDataset) -> String {
    let mut h = Sha256::new();
    h.update(dataset_fingerprint(data).as_bytes());
    let learner = match config.learner.kind {
        LearnerKind::Builtin => serde_json::to_string(&config.learner.builtin),
        LearnerKind::External => serde_json::to_string(&(&config.learner.external.command, &config.learner.builtin)),
    }
    .expect("learner config serializes");
    h.update(learner.as_bytes());
    h.update(config.rng_seed.to_le_bytes());
    hex(&h.finalize())[..16].to_string()
}

pub fn build_learner(config: &LearnerConfig, workdir: &Path) -> Result<LearnerHandle> {
    Ok(match config.kind {
        LearnerKind::Builtin => Box::new(BuiltinLearner::new(config.builtin.clone())?),
        LearnerKind::External => {
            let mut external = config.external.clone();
            external.workdir = workdir.to_path_buf();
            external.learner.get_or_insert_with(|| config.builtin.clone());
            Box::new(ExternalLearner::spawn(external)?)
        }
    })
}

/// Validation mIoU of the current segmentation model.
pub fn validation_miou(learner: &LearnerHandle, val: &Dataset) -> Result<f64> {
    let preds = val
        .images
        .par_iter()
        .map(|img| Ok(learner.predict_probs(img)?.argmax()))
        .collect::<Result<Vec<Array2<ClassId>>>>()?;
    let gt: Vec<&Array2<ClassId>> = val.images.iter().map(|i| &i.labels).collect();
    compute_miou(&preds, &gt, val.num_classes)
}

fn train_on_pool(learner: &mut LearnerHandle, pool: &PoolState, data: &SplitDataset, seed: u64) -> Result<TrainReport> {
    let masks: Vec<(usize, LabelMask)> = (0..data.train.len())
        .filter(|&i| !pool.is_untouched(i))
        .map(|i| (i, pool.mask_of(i)))
        .collect();
    let job = SegJob {
        num_classes: data.train.num_classes,
        train: masks
            .iter()
            .map(|(i, mask)| SegSample {
                image: &data.train.images[*i],
                labels: pool.revealed(*i),
                mask,
            })
            .collect(),
        val: &data.val,
        seed,
    };
    learner.train_segmentation(&job)
}

/// Trains on every training pixel and reports validation mIoU, reusing a cached result
/// with the same fingerprint from `cache_dir`.
pub fn run_reference(config: &ExperimentConfig, data: &SplitDataset, cache_dir: Option<&Path>) -> Result<ReferenceResult> {
    let fingerprint = reference_fingerprint(config, data);
    let cache_file = cache_dir.map(|d| d.join(format!("reference_{fingerprint}.json")));
    if let Some(path) = cache_file.as_ref().filter(|p| p.exists()) {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cached: ReferenceResult = serde_json::from_str(&text)?;
        if cached.fingerprint == fingerprint {
            cached.cached = true;
            log::info!("reference mIoU {:.4} (cached)", cached.p100_miou);
            return Ok(cached);
        }
    }
    let workdir = cache_dir
        .map(|d| d.join("reference_worker"))
        .unwrap_or_else(|| config.learner.external.workdir.join("reference"));
    let mut learner = build_learner(&config.learner, &workdir)?;
    let pool = seed_pool(&data.train, data.train.len(), config.rng_seed)?;
    let report = train_on_pool(&mut learner, &pool, data, derive_seed(config.rng_seed, &[purpose::REFERENCE]))?;
    let p100_miou = validation_miou(&learner, &data.val)?;
    log::info!("reference mIoU {p100_miou:.4} after {} epochs", report.epochs_run);
    let result = ReferenceResult {
        fingerprint,
        p100_miou,
        report,
        cached: false,
    };
    if let Some(path) = cache_file {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, serde_json::to_string_pretty(&result)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(result)
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    data: &'a SplitDataset,
    options: &'a RunOptions,
    budget: usize,
    total_pixels: usize,
    total_vertices: usize,
}

fn dump_plane(root: &Option<PathBuf>, rep: usize, round: usize, id: &str, plane: &Array2<f64>) -> Result<()> {
    let Some(root) = root else { return Ok(()) };
    let dir = root.join(format!("rep_{rep}")).join(format!("round_{round:03}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    dmt::write_plane(&dir.join(format!("{id}.dmt")), plane)
}

impl Context<'_> {
    fn train(&self) -> &Dataset {
        &self.data.train
    }

    fn information(&self, learner: &LearnerHandle, img: &ImageRecord, rep_seed: u64, round: usize) -> Result<InformationMap<f64>> {
        match self.config.acquisition.measure {
            Measure::Entropy => entropy_map(&learner.predict_probs(img)?),
            Measure::VoteEntropy => {
                let seed = derive_seed(rep_seed, &[purpose::COMMITTEE, round as u64, hash_str(&img.id)]);
                vote_entropy_map(&learner.predict_committee(img, self.config.committee_size, seed)?)
            }
            Measure::None => Err(Error::Config("scored strategies need an information measure".into())),
        }
    }

    fn select(&self, learner: &LearnerHandle, pool: &PoolState, rep: usize, rep_seed: u64) -> Result<Batch> {
        let a = &self.config.acquisition;
        let round = pool.round_index;
        match a.strategy {
            Strategy::ImageRandom => Ok(random_images(pool, self.train(), a.batch_images, rep_seed)),
            Strategy::RegionRandom => {
                random_regions(pool, self.train(), a.region_size.unwrap_or(0), self.budget, rep_seed)
            }
            Strategy::ImageScore => {
                let maps = pool
                    .untouched_images()
                    .par_iter()
                    .map(|&i| {
                        let img = &self.train().images[i];
                        let info = self.information(learner, img, rep_seed, round)?;
                        dump_plane(&self.options.dump_info_maps, rep, round, &img.id, &info.values)?;
                        Ok(info)
                    })
                    .collect::<Result<Vec<_>>>()?;
                select_images(self.train(), score_images(&maps), a.batch_images)
            }
            Strategy::RegionScore => self.select_regions(learner, pool, rep, rep_seed),
        }
    }

    fn select_regions(&self, learner: &LearnerHandle, pool: &PoolState, rep: usize, rep_seed: u64) -> Result<Batch> {
        let a = &self.config.acquisition;
        let w = a.region_size.unwrap_or(0);
        let round = pool.round_index;
        let open: Vec<usize> = (0..self.train().len())
            .filter(|&i| {
                let img = &self.train().images[i];
                !pool.is_fully_labeled(i) && w <= img.height() && w <= img.width()
            })
            .collect();
        let maps = open
            .par_iter()
            .map(|&i| -> Result<PixelMaps> {
                let img = &self.train().images[i];
                let info = self.information(learner, img, rep_seed, round)?;
                dump_plane(&self.options.dump_info_maps, rep, round, &img.id, &info.values)?;
                let cost = if a.fusion.uses_cost() {
                    let cost = predict_cost_map(self.config.cost_mode, learner.as_ref(), img)?;
                    dump_plane(&self.options.dump_cost_maps, rep, round, &img.id, &cost.values)?;
                    Some(cost.values)
                } else {
                    None
                };
                Ok(PixelMaps {
                    index: i,
                    info: info.values,
                    cost,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (batch, fused) = select_scored_regions(pool, self.train(), maps, w, a.fusion, self.budget)?;
        for f in &fused {
            dump_plane(&self.options.dump_region_maps, rep, round, &f.image_id, &f.values)?;
        }
        Ok(batch)
    }

    fn train_cost(&self, learner: &mut LearnerHandle, pool: &PoolState, seed: u64) -> Result<TrainReport> {
        let targets = cost_training_targets(pool, self.train(), self.config.cost_target_downscale)?;
        let val_clicks = self
            .data
            .val
            .images
            .iter()
            .map(|img| Ok(image_clicks(img)?.values))
            .collect::<Result<Vec<_>>>()?;
        let job = CostJob {
            train: targets
                .iter()
                .map(|t| CostSample {
                    image: &self.train().images[t.image_index],
                    clicks: &t.clicks,
                    mask: Some(&t.mask),
                })
                .collect(),
            val: self
                .data
                .val
                .images
                .iter()
                .zip(&val_clicks)
                .map(|(image, clicks)| CostSample {
                    image,
                    clicks,
                    mask: None,
                })
                .collect(),
            seed,
        };
        learner.train_cost(&job)
    }

    fn point(&self, round: usize, pool: &PoolState, clicks: u64, miou: f64) -> CurvePoint {
        CurvePoint {
            round,
            pixel_frac: pool.labeled_pixels() as f64 / self.total_pixels as f64,
            click_frac: clicks as f64 / self.total_vertices as f64,
            miou,
        }
    }

    fn run_repetition(&self, rep: usize) -> Result<RepetitionResult> {
        let config = self.config;
        let train = self.train();
        let rep_seed = derive_seed(config.rng_seed, &[purpose::REPETITION, rep as u64]);
        let rep_dir = self.options.out_dir.as_ref().map(|d| d.join(format!("rep_{rep}")));
        if let Some(dir) = &rep_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = |name: &str| rep_dir.as_ref().map(|d| d.join(name));
        let (ckpt_path, acq_path, rec_path, curve_path) = (
            file("pool_state.json"),
            file("acquisitions.jsonl"),
            file("receipts.jsonl"),
            file("curve.csv"),
        );

        let resumed = match (&ckpt_path, self.options.resume) {
            (Some(p), true) if p.exists() => Some(self.resume(p, &acq_path, &rec_path, &curve_path)?),
            _ => None,
        };
        let (mut pool, mut acquisitions, mut receipts, mut points) = match resumed {
            Some(state) => {
                log::info!("rep {rep}: resuming at round {}", state.0.round_index);
                state
            }
            None => {
                for p in [&ckpt_path, &acq_path, &rec_path, &curve_path].into_iter().flatten() {
                    let _ = std::fs::remove_file(p);
                }
                let pool = seed_pool(train, config.seed_images, rep_seed)?;
                let mut batch = Batch::default();
                for i in 0..train.len() {
                    for rect in pool.regions(i) {
                        batch.regions.push(Region::new(train.images[i].id.clone(), *rect));
                        batch.scores.push(None);
                        batch.total_pixels += rect.area();
                    }
                }
                let AnnotatedBatch {
                    acquisition: acq,
                    receipts: recs,
                    ..
                } = annotate_batch(0, "seed", &batch, train, &PoolState::empty(train, rep_seed))?;
                self.persist(&pool, &acq, &recs, &ckpt_path, &acq_path, &rec_path)?;
                (pool, vec![acq], recs, Vec::new())
            }
        };
        let mut clicks: u64 = receipts.iter().map(ReceiptRecord::clicks).sum();
        let workdir = rep_dir
            .as_ref()
            .map(|d| d.join("worker"))
            .unwrap_or_else(|| config.learner.external.workdir.join(format!("rep_{rep}")));
        let mut learner = build_learner(&config.learner, &workdir)?;

        loop {
            let round = pool.round_index;
            let report = train_on_pool(&mut learner, &pool, self.data, derive_seed(rep_seed, &[purpose::TRAIN_SEG, round as u64]))?;
            let miou = validation_miou(&learner, &self.data.val)?;
            points.push(self.point(round, &pool, clicks, miou));
            if let Some(p) = &curve_path {
                ALCurve::new(points.clone())?.write_csv(p)?;
            }
            log::info!(
                "{} rep {rep} round {round}: pixels {:.4} clicks {:.4} mIoU {miou:.4} ({} epochs)",
                label(config),
                points[points.len() - 1].pixel_frac,
                points[points.len() - 1].click_frac,
                report.epochs_run
            );
            if round >= config.max_rounds || pool.labeled_pixels() == self.total_pixels {
                break;
            }
            if config.needs_cost_model() {
                self.train_cost(&mut learner, &pool, derive_seed(rep_seed, &[purpose::TRAIN_COST, round as u64]))?;
            }
            let batch = self.select(&learner, &pool, rep, rep_seed)?;
            if batch.is_empty() {
                log::info!("rep {rep}: pool exhausted at round {round}");
                break;
            }
            let strategy = serde_json::to_value(config.acquisition.strategy)?;
            let AnnotatedBatch {
                acquisition: acq,
                receipts: recs,
                answered,
            } = annotate_batch(round + 1, strategy.as_str().unwrap_or("?"), &batch, train, &pool)?;
            pool = pool.commit_regions(train, &answered)?;
            clicks += recs.iter().map(ReceiptRecord::clicks).sum::<u64>();
            self.persist(&pool, &acq, &recs, &ckpt_path, &acq_path, &rec_path)?;
            acquisitions.push(acq);
            receipts.extend(recs);
        }
        Ok(RepetitionResult {
            index: rep,
            seed: rep_seed,
            curve: ALCurve::new(points)?,
            acquisitions,
            receipts,
        })
    }

    fn persist(
        &self,
        pool: &PoolState,
        acq: &AcquisitionRecord,
        recs: &[ReceiptRecord],
        ckpt: &Option<PathBuf>,
        acq_path: &Option<PathBuf>,
        rec_path: &Option<PathBuf>,
    ) -> Result<()> {
        if let Some(p) = acq_path {
            append_jsonl(p, std::slice::from_ref(acq))?;
        }
        if let Some(p) = rec_path {
            append_jsonl(p, recs)?;
        }
        if let Some(p) = ckpt {
            PoolCheckpoint::capture(pool, self.train()).save(p)?;
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn resume(
        &self,
        ckpt: &Path,
        acq_path: &Option<PathBuf>,
        rec_path: &Option<PathBuf>,
        curve_path: &Option<PathBuf>,
    ) -> Result<(PoolState, Vec<AcquisitionRecord>, Vec<ReceiptRecord>, Vec<CurvePoint>)> {
        let pool = PoolCheckpoint::load(ckpt)?.restore(self.train())?;
        let last = pool.round_index;
        let mut acquisitions: Vec<AcquisitionRecord> = match existing(acq_path) {
            Some(p) => read_jsonl(p)?,
            None => Vec::new(),
        };
        let mut receipts: Vec<ReceiptRecord> = match existing(rec_path) {
            Some(p) => read_jsonl(p)?,
            None => Vec::new(),
        };
        acquisitions.retain(|a| a.round <= last);
        receipts.retain(|r| r.round <= last);
        let totals = reconcile(&acquisitions, &receipts)?;
        let logged: usize = totals.iter().map(|t| t.pixels).sum();
        if logged != pool.labeled_pixels() {
            return Err(Error::State(format!(
                "checkpoint has {} labeled pixels but the ledgers account for {logged}",
                pool.labeled_pixels()
            )));
        }
        let mut points = match existing(curve_path) {
            Some(p) => ALCurve::read_csv(p)?.points,
            None => Vec::new(),
        };
        points.retain(|p| p.round < last);
        if let Some(p) = acq_path {
            write_jsonl(p, &acquisitions)?;
        }
        if let Some(p) = rec_path {
            write_jsonl(p, &receipts)?;
        }
        Ok((pool, acquisitions, receipts, points))
    }
}

fn existing(p: &Option<PathBuf>) -> Option<&PathBuf> {
    p.as_ref().filter(|p| p.exists())
}

/// Runs every repetition and aggregates the curves against `p100_miou`.
pub fn run_experiment(
    config: &ExperimentConfig,
    data: &SplitDataset,
    p100_miou: f64,
    options: &RunOptions,
) -> Result<ExperimentResult> {
    config.validate()?;
    let first = data
        .train
        .images
        .first()
        .ok_or_else(|| Error::Config("training split is empty".into()))?;
    config.validate_against(data.train.len(), first.height(), first.width())?;
    let total_vertices = data.train.total_vertices();
    if total_vertices == 0 {
        return Err(Error::Data("training split has no polygon vertices".into()));
    }
    let ctx = Context {
        config,
        data,
        options,
        budget: pixel_budget(&data.train, config.acquisition.batch_images)?,
        total_pixels: data.train.total_pixels(),
        total_vertices,
    };
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        std::fs::write(&path, config.to_json()).map_err(|e| Error::io(&path, e))?;
    }
    let repetitions = (0..config.repetitions)
        .into_par_iter()
        .map(|k| ctx.run_repetition(k))
        .collect::<Result<Vec<_>>>()?;
    let curves: Vec<ALCurve> = repetitions.iter().map(|r| r.curve.clone()).collect();
    let mean = average_curves(&curves)?;
    let summary = Summary {
        label: label(config),
        p100_miou,
        index: performance_index(&mean, p100_miou),
        repetitions: curves.iter().map(|c| performance_index(c, p100_miou)).collect(),
        rounds: mean.points.len(),
        total_pixels: ctx.total_pixels,
        total_vertices,
    };
    if let Some(dir) = &options.out_dir {
        mean.write_csv(&dir.join("curve_mean.csv"))?;
        let path = dir.join("summary.json");
        std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(ExperimentResult {
        repetitions,
        mean,
        summary,
    })
}

/// Reads a results directory written by [`run_experiment`].
pub fn load_results(dir: &Path) -> Result<(Summary, ALCurve, Vec<ALCurve>)> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let summary: Summary = serde_json::from_str(&text)?;
    let mean = ALCurve::read_csv(&dir.join("curve_mean.csv"))?;
    let mut reps = Vec::new();
    for k in 0.. {
        let p = dir.join(format!("rep_{k}")).join("curve.csv");
        if !p.exists() {
            break;
        }
        reps.push(ALCurve::read_csv(&p)?);
    }
    Ok((summary, mean, reps))
}

/// SVG of every repetition plus the mean curve of one results directory.
pub fn plot_results(summary: &Summary, mean: &ALCurve, reps: &[ALCurve]) -> String {
    let mut series: Vec<(String, &ALCurve)> = vec![(format!("{} (mean)", summary.label), mean)];
    for (k, c) in reps.iter().enumerate() {
        series.push((format!("rep {k}"), c));
    }
    render_svg(&series, Some(summary.p100_miou))
}

/// Rectangles labeled in one image, for callers that hold only a checkpoint.
pub fn labeled_rects(pool: &PoolState, data: &Dataset, image_id: &str) -> Result<Vec<Rect>> {
    Ok(pool.regions(data.index_of(image_id)?).to_vec())
}

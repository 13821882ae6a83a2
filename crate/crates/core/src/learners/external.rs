//! Client side of the JSON-lines worker protocol.
//!
//! The driver launches `command... <workdir>` once per worker slot. Inputs are written
//! as `.dmt` files under the working directory and referenced by relative path; worker
//! stderr goes to `worker-<k>.stderr.log` there and is attached to protocol errors.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::protocol::{CostInput, Envelope, Request, Response, SegInput, Status};
use super::{dmt, BuiltinConfig, CostJob, Learner, LearnerKind, SegJob, TrainReport};
use crate::cost::CostMap;
use crate::error::{Error, Result};
use crate::info::{CommitteePrediction, ProbabilityMap};
use crate::pool::ImageRecord;
use crate::seeding::hash_str;

const STDERR_TAIL_BYTES: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExternalConfig {
    /// Program and leading arguments; the working directory is appended.
    pub command: Vec<String>,
    pub workdir: PathBuf,
    pub workers: usize,
    /// Forwarded with every segmentation training request.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learner: Option<BuiltinConfig>,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        ExternalConfig {
            command: Vec::new(),
            workdir: PathBuf::from("worker"),
            workers: 1,
            learner: None,
        }
    }
}

struct WorkerProcess {
    index: usize,
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    stderr_log: PathBuf,
    next_id: u64,
}

impl WorkerProcess {
    fn spawn(config: &ExternalConfig, index: usize) -> Result<Self> {
        let (program, args) = config
            .command
            .split_first()
            .ok_or_else(|| Error::Config("external learner command is empty".into()))?;
        let stderr_log = config.workdir.join(format!("worker-{index}.stderr.log"));
        let stderr = File::create(&stderr_log).map_err(|e| Error::io(&stderr_log, e))?;
        let mut child = Command::new(program)
            .args(args)
            .arg(&config.workdir)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(stderr)
            .spawn()
            .map_err(|e| Error::Protocol {
                message: format!("cannot start worker `{program}`: {e}"),
                stderr: String::new(),
            })?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        Ok(WorkerProcess {
            index,
            child,
            stdin,
            stdout,
            stderr_log,
            next_id: 0,
        })
    }

    fn stderr_tail(&self) -> String {
        let text = std::fs::read(&self.stderr_log).unwrap_or_default();
        let start = text.len().saturating_sub(STDERR_TAIL_BYTES);
        String::from_utf8_lossy(&text[start..]).into_owned()
    }

    fn failure(&mut self, message: String) -> Error {
        // give a crashing worker a moment to flush stderr
        let deadline = Instant::now() + Duration::from_millis(500);
        while Instant::now() < deadline {
            if !matches!(self.child.try_wait(), Ok(None)) {
                break;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        Error::Protocol {
            message: format!("worker {}: {message}", self.index),
            stderr: self.stderr_tail(),
        }
    }

    fn call(&mut self, request: Request) -> Result<Response> {
        self.next_id += 1;
        let id = self.next_id;
        let line = serde_json::to_string(&Envelope {
            id: Some(id),
            request,
        })?;
        let sent = match self.stdin.as_mut() {
            Some(stdin) => writeln!(stdin, "{line}").and_then(|_| stdin.flush()),
            None => Err(std::io::Error::other("stdin closed")),
        };
        if let Err(e) = sent {
            return Err(self.failure(format!("cannot send request: {e}")));
        }
        let mut reply = String::new();
        match self.stdout.read_line(&mut reply) {
            Ok(0) => return Err(self.failure("worker exited without responding".into())),
            Err(e) => return Err(self.failure(format!("cannot read response: {e}"))),
            Ok(_) => {}
        }
        let response: Response = match serde_json::from_str(reply.trim_end()) {
            Ok(r) => r,
            Err(e) => return Err(self.failure(format!("malformed response {:?}: {e}", reply.trim_end()))),
        };
        if response.id != Some(id) {
            return Err(self.failure(format!("response id {:?} does not match request {id}", response.id)));
        }
        if response.status == Status::Error {
            let code = response.code.map(|c| format!("{c:?}")).unwrap_or_default();
            let message = response.message.unwrap_or_default();
            return Err(self.failure(format!("{code}: {message}")));
        }
        Ok(response)
    }
}

impl Drop for WorkerProcess {
    fn drop(&mut self) {
        drop(self.stdin.take());
        let deadline = Instant::now() + Duration::from_secs(2);
        while Instant::now() < deadline {
            if !matches!(self.child.try_wait(), Ok(None)) {
                return;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Learner backed by one or more worker processes.
///
/// Training requests go to every worker so any of them can serve predictions; the
/// workers are expected to be deterministic.
pub struct ExternalLearner {
    config: ExternalConfig,
    workers: Vec<Mutex<WorkerProcess>>,
    written: Mutex<HashSet<String>>,
    seg_trained: bool,
    cost_trained: bool,
}

fn safe_name(image_id: &str) -> String {
    if !image_id.is_empty() && image_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && image_id != "." && image_id != ".." {
        image_id.to_string()
    } else {
        format!("img_{:016x}", hash_str(image_id))
    }
}

fn protocol_error(message: String) -> Error {
    Error::Protocol {
        message,
        stderr: String::new(),
    }
}

impl ExternalLearner {
    pub fn spawn(config: ExternalConfig) -> Result<Self> {
        if config.workers == 0 {
            return Err(Error::Config("external learner needs at least one worker".into()));
        }
        std::fs::create_dir_all(&config.workdir).map_err(|e| Error::io(&config.workdir, e))?;
        let workers = (0..config.workers)
            .map(|k| WorkerProcess::spawn(&config, k).map(Mutex::new))
            .collect::<Result<_>>()?;
        Ok(ExternalLearner {
            config,
            workers,
            written: Mutex::new(HashSet::new()),
            seg_trained: false,
            cost_trained: false,
        })
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.config
    }

    fn abs(&self, rel: &Path) -> PathBuf {
        self.config.workdir.join(rel)
    }

    fn ensure_parent(&self, rel: &Path) -> Result<PathBuf> {
        let full = self.abs(rel);
        if let Some(parent) = full.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(full)
    }

    /// Features are immutable, so each image is written once per learner.
    fn features(&self, image: &ImageRecord) -> Result<PathBuf> {
        let rel = PathBuf::from("inputs").join(safe_name(&image.id)).join("features.dmt");
        let mut written = self.written.lock().unwrap();
        if !written.contains(&image.id) {
            dmt::write(&self.ensure_parent(&rel)?, image.features.view())?;
            written.insert(image.id.clone());
        }
        Ok(rel)
    }

    fn broadcast(&self, request: Request) -> Result<Response> {
        let results: Vec<Result<Response>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .workers
                .iter()
                .map(|w| {
                    let request = request.clone();
                    s.spawn(move || w.lock().unwrap().call(request))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
        });
        let mut first = None;
        for r in results {
            let r = r?;
            first.get_or_insert(r);
        }
        Ok(first.expect("at least one worker"))
    }

    /// Sends to an idle worker if one exists, otherwise to a fixed one for this key.
    fn dispatch(&self, key: &str, request: Request) -> Result<Response> {
        for w in &self.workers {
            if let Ok(mut guard) = w.try_lock() {
                return guard.call(request);
            }
        }
        let k = (hash_str(key) % self.workers.len() as u64) as usize;
        self.workers[k].lock().unwrap().call(request)
    }

    fn read_probs(&self, image: &ImageRecord, rel: &Path) -> Result<ProbabilityMap<f64>> {
        let t: Array3<f32> = dmt::read(&self.abs(rel))?;
        if (t.dim().0, t.dim().1) != (image.height(), image.width()) {
            return Err(protocol_error(format!("{}: prediction has wrong shape {:?}", image.id, t.dim())));
        }
        let mut values = t.permuted_axes([2, 0, 1]).mapv(f64::from).as_standard_layout().into_owned();
        renormalize(&mut values);
        let map = ProbabilityMap::new_unchecked(image.id.clone(), values);
        map.validate().map_err(|e| protocol_error(format!("{}: invalid probabilities: {e}", image.id)))?;
        Ok(map)
    }
}

/// Rescales each pixel's distribution to sum to one, absorbing f32 storage rounding.
fn renormalize(values: &mut Array3<f64>) {
    let sums = values.sum_axis(Axis(0));
    for mut plane in values.outer_iter_mut() {
        plane.zip_mut_with(&sums, |v, &s| {
            if s > 0.0 {
                *v /= s
            }
        });
    }
}

impl Learner for ExternalLearner {
    fn kind(&self) -> LearnerKind {
        LearnerKind::External
    }

    fn is_trained(&self) -> bool {
        self.seg_trained
    }

    fn train_segmentation(&mut self, job: &SegJob<'_>) -> Result<TrainReport> {
        let mut train = Vec::with_capacity(job.train.len());
        for s in &job.train {
            let dir = PathBuf::from("train_seg").join(safe_name(&s.image.id));
            let labels = dir.join("labels.dmt");
            let mask = dir.join("mask.dmt");
            dmt::write_labels(&self.ensure_parent(&labels)?, s.labels)?;
            dmt::write_mask(&self.abs(&mask), &s.mask.0)?;
            train.push(SegInput {
                image_id: s.image.id.clone(),
                features: self.features(s.image)?,
                labels,
                mask: Some(mask),
            });
        }
        let mut val = Vec::with_capacity(job.val.len());
        for img in &job.val.images {
            let labels = PathBuf::from("inputs").join(safe_name(&img.id)).join("labels.dmt");
            let features = self.features(img)?;
            if !self.abs(&labels).exists() {
                dmt::write_labels(&self.abs(&labels), &img.labels)?;
            }
            val.push(SegInput {
                image_id: img.id.clone(),
                features,
                labels,
                mask: None,
            });
        }
        self.seg_trained = false;
        self.cost_trained = false;
        let response = self.broadcast(Request::TrainSeg {
            num_classes: job.num_classes,
            train,
            val,
            seed: job.seed,
            config: self.config.learner.clone(),
        })?;
        self.seg_trained = true;
        Ok(response.report.unwrap_or_default())
    }

    fn predict_probs(&self, image: &ImageRecord) -> Result<ProbabilityMap<f64>> {
        if !self.seg_trained {
            return Err(Error::State("external segmentation model is untrained".into()));
        }
        let out = PathBuf::from("outputs").join(safe_name(&image.id)).join("probs.dmt");
        self.ensure_parent(&out)?;
        let response = self.dispatch(
            &image.id,
            Request::PredictProbs {
                image_id: image.id.clone(),
                features: self.features(image)?,
                out,
            },
        )?;
        let path = response
            .output
            .ok_or_else(|| protocol_error("predict_probs response lacks `output`".into()))?;
        self.read_probs(image, &path)
    }

    fn predict_committee(&self, image: &ImageRecord, members: usize, seed: u64) -> Result<CommitteePrediction<f64>> {
        if !self.seg_trained {
            return Err(Error::State("external segmentation model is untrained".into()));
        }
        let out_prefix = PathBuf::from("outputs").join(safe_name(&image.id)).join("member");
        self.ensure_parent(&out_prefix)?;
        let response = self.dispatch(
            &image.id,
            Request::PredictCommittee {
                image_id: image.id.clone(),
                features: self.features(image)?,
                members,
                seed,
                out_prefix,
            },
        )?;
        let paths = response
            .outputs
            .ok_or_else(|| protocol_error("predict_committee response lacks `outputs`".into()))?;
        if paths.len() != members {
            return Err(protocol_error(format!("expected {members} committee outputs, got {}", paths.len())));
        }
        let maps = paths.iter().map(|p| self.read_probs(image, p)).collect::<Result<Vec<_>>>()?;
        CommitteePrediction::new(maps)
    }

    fn train_cost(&mut self, job: &CostJob<'_>) -> Result<TrainReport> {
        if !self.seg_trained {
            return Err(Error::State("cost training requires a trained segmentation model".into()));
        }
        let encode = |split: &str, samples: &[super::CostSample<'_>]| -> Result<Vec<CostInput>> {
            samples
                .iter()
                .map(|s| {
                    let dir = PathBuf::from(format!("train_cost_{split}")).join(safe_name(&s.image.id));
                    let clicks = dir.join("clicks.dmt");
                    dmt::write_plane(&self.ensure_parent(&clicks)?, s.clicks)?;
                    let mask = match s.mask {
                        Some(m) => {
                            let p = dir.join("mask.dmt");
                            dmt::write_mask(&self.abs(&p), &m.0)?;
                            Some(p)
                        }
                        None => None,
                    };
                    Ok(CostInput {
                        image_id: s.image.id.clone(),
                        features: self.features(s.image)?,
                        clicks,
                        mask,
                    })
                })
                .collect()
        };
        let train = encode("train", &job.train)?;
        let val = encode("val", &job.val)?;
        let response = self.broadcast(Request::TrainCost {
            train,
            val,
            seed: job.seed,
        })?;
        self.cost_trained = true;
        Ok(response.report.unwrap_or_default())
    }

    fn predict_cost(&self, image: &ImageRecord) -> Result<CostMap> {
        if !self.cost_trained {
            return Err(Error::State("external cost model is untrained".into()));
        }
        let out = PathBuf::from("outputs").join(safe_name(&image.id)).join("cost.dmt");
        self.ensure_parent(&out)?;
        let response = self.dispatch(
            &image.id,
            Request::PredictCost {
                image_id: image.id.clone(),
                features: self.features(image)?,
                out,
            },
        )?;
        let path = response
            .output
            .ok_or_else(|| protocol_error("predict_cost response lacks `output`".into()))?;
        let plane: Array2<f32> = dmt::read_plane(&self.abs(&path))?;
        if plane.dim() != (image.height(), image.width()) {
            return Err(protocol_error(format!("{}: cost map has wrong shape", image.id)));
        }
        CostMap::new(image.id.clone(), plane.mapv(|v| f64::from(v).max(0.0)))
    }
}

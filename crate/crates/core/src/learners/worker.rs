//! Worker side of the JSON-lines protocol, backed by [`BuiltinLearner`].

use std::io::{BufRead, Write};
use std::path::{Component, Path, PathBuf};

use ndarray::{Array2, Array3};

use super::protocol::{CostInput, Envelope, ErrorCode, Request, Response, SegInput, COMMANDS};
use super::{dmt, BuiltinConfig, BuiltinLearner, CostJob, CostSample, Learner, SegJob, SegSample};
use crate::error::{Error, Result};
use crate::pool::{ClassId, Dataset, ImageRecord, LabelMask};

type LoadedCost = (ImageRecord, Array2<f64>, Option<LabelMask>);

fn sample((image, clicks, mask): &LoadedCost) -> CostSample<'_> {
    CostSample {
        image,
        clicks,
        mask: mask.as_ref(),
    }
}

struct Session {
    workdir: PathBuf,
    learner: BuiltinLearner,
}

struct Failure(ErrorCode, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } => ErrorCode::Io,
            Error::State(_) => ErrorCode::Untrained,
            Error::Config(_) | Error::Data(_) => ErrorCode::BadRequest,
            _ => ErrorCode::Failed,
        };
        Failure(code, e.to_string())
    }
}

impl Session {
    fn input(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    /// Output paths must stay inside the working directory.
    fn output(&self, p: &Path) -> Result<PathBuf, Failure> {
        let escapes = p.is_absolute() && !p.starts_with(&self.workdir)
            || p.components().any(|c| matches!(c, Component::ParentDir));
        if escapes {
            return Err(Failure(
                ErrorCode::BadRequest,
                format!("output path {} leaves the working directory", p.display()),
            ));
        }
        let full = self.workdir.join(p);
        if let Some(parent) = full.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(full)
    }

    fn image(&self, image_id: &str, features: &Path, labels: Option<&Path>) -> Result<ImageRecord> {
        let features = dmt::read(&self.input(features))?;
        let (h, w, _) = features.dim();
        let labels = match labels {
            Some(p) => dmt::read_labels(&self.input(p))?,
            None => Array2::from_elem((h, w), ClassId::UNLABELED),
        };
        if labels.dim() != (h, w) {
            return Err(Error::Data(format!("{image_id}: label shape differs from features")));
        }
        Ok(ImageRecord {
            id: image_id.to_string(),
            features,
            labels,
            polygons: Vec::new(),
        })
    }

    fn seg_samples(&self, inputs: &[SegInput]) -> Result<Vec<(ImageRecord, LabelMask)>> {
        inputs
            .iter()
            .map(|s| {
                let img = self.image(&s.image_id, &s.features, Some(&s.labels))?;
                let mask = match &s.mask {
                    Some(p) => dmt::read_mask(&self.input(p))?,
                    None => img.labels.mapv(ClassId::is_labeled),
                };
                if mask.dim() != img.labels.dim() {
                    return Err(Error::Data(format!("{}: mask shape differs from labels", s.image_id)));
                }
                Ok((img, LabelMask(mask)))
            })
            .collect()
    }

    fn cost_samples(&self, inputs: &[CostInput]) -> Result<Vec<LoadedCost>> {
        inputs
            .iter()
            .map(|s| {
                let img = self.image(&s.image_id, &s.features, None)?;
                let clicks = dmt::read_plane(&self.input(&s.clicks))?.mapv(f64::from);
                let mask = s
                    .mask
                    .as_ref()
                    .map(|p| dmt::read_mask(&self.input(p)).map(LabelMask))
                    .transpose()?;
                Ok((img, clicks, mask))
            })
            .collect()
    }

    fn handle(&mut self, id: Option<u64>, request: Request) -> Result<Response, Failure> {
        let mut response = Response::ok(id);
        match request {
            Request::TrainSeg {
                num_classes,
                train,
                val,
                seed,
                config,
            } => {
                let config = config.unwrap_or_else(|| self.learner.config().clone());
                let train = self.seg_samples(&train)?;
                let val = Dataset::new(num_classes, self.seg_samples(&val)?.into_iter().map(|(i, _)| i).collect())?;
                let job = SegJob {
                    num_classes,
                    train: train
                        .iter()
                        .map(|(image, mask)| SegSample {
                            image,
                            labels: &image.labels,
                            mask,
                        })
                        .collect(),
                    val: &val,
                    seed,
                };
                self.learner = BuiltinLearner::new(config)?;
                let mut report = self.learner.train_segmentation(&job)?;
                report.loss_history.clear();
                response.report = Some(report);
            }
            Request::TrainCost { train, val, seed } => {
                let train = self.cost_samples(&train)?;
                let val = self.cost_samples(&val)?;
                let job = CostJob {
                    train: train.iter().map(sample).collect(),
                    val: val.iter().map(sample).collect(),
                    seed,
                };
                let mut report = self.learner.train_cost(&job)?;
                report.loss_history.clear();
                response.report = Some(report);
            }
            Request::PredictProbs { image_id, features, out } => {
                let img = self.image(&image_id, &features, None)?;
                let probs = self.learner.predict_probs(&img)?;
                dmt::write(&self.output(&out)?, channel_minor(probs.values()).view())?;
                response.output = Some(out);
            }
            Request::PredictCommittee {
                image_id,
                features,
                members,
                seed,
                out_prefix,
            } => {
                let img = self.image(&image_id, &features, None)?;
                let committee = self.learner.predict_committee(&img, members, seed)?;
                let mut outputs = Vec::with_capacity(members);
                for (k, member) in committee.members().iter().enumerate() {
                    let mut name = out_prefix.clone().into_os_string();
                    name.push(format!("_{k}.dmt"));
                    let out = PathBuf::from(name);
                    dmt::write(&self.output(&out)?, channel_minor(member.values()).view())?;
                    outputs.push(out);
                }
                response.outputs = Some(outputs);
            }
            Request::PredictCost { image_id, features, out } => {
                let img = self.image(&image_id, &features, None)?;
                let cost = self.learner.predict_cost(&img)?;
                dmt::write_plane(&self.output(&out)?, &cost.values)?;
                response.output = Some(out);
            }
        }
        Ok(response)
    }

    fn respond(&mut self, line: &str) -> Response {
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                let mut r = Response::error(None, ErrorCode::BadJson, e.to_string());
                r.line = Some(line.to_string());
                return r;
            }
        };
        let id = value.get("id").and_then(serde_json::Value::as_u64);
        match value.get("cmd").and_then(serde_json::Value::as_str) {
            Some(cmd) if COMMANDS.contains(&cmd) => {}
            Some(cmd) => return Response::error(id, ErrorCode::UnknownCmd, format!("no such command: {cmd}")),
            None => return Response::error(id, ErrorCode::BadRequest, "missing \"cmd\""),
        }
        let envelope: Envelope = match serde_json::from_value(value) {
            Ok(e) => e,
            Err(e) => return Response::error(id, ErrorCode::BadRequest, e.to_string()),
        };
        self.handle(id, envelope.request)
            .unwrap_or_else(|Failure(code, message)| Response::error(id, code, message))
    }
}

/// `(C, H, W)` probabilities to the `(H, W, C)` file layout.
fn channel_minor(values: &Array3<f64>) -> Array3<f32> {
    values.view().permuted_axes([1, 2, 0]).mapv(|v| v as f32)
}

/// Serves requests from `input` until end of stream, one response line per request.
/// Blank lines are ignored.
pub fn serve<R: BufRead, W: Write>(input: R, mut output: W, workdir: &Path) -> Result<()> {
    std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let mut session = Session {
        workdir: workdir.to_path_buf(),
        learner: BuiltinLearner::new(BuiltinConfig::default())?,
    };
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let response = session.respond(&line);
        if response.code.is_some() {
            log::warn!("worker request failed: {}", response.message.as_deref().unwrap_or(""));
        }
        let text = serde_json::to_string(&response)?;
        writeln!(output, "{text}").map_err(|e| Error::io("<stdout>", e))?;
        output.flush().map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

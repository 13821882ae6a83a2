//! In-process reference learner.
//!
//! Segmentation is pixelwise multinomial logistic regression over the image's feature
//! planes plus two normalized coordinate planes. Cost is a linear regressor over the
//! same inputs plus boundary statistics of the predicted labels: the boundary
//! density, its local average, and the local share of each class. Segmentation is fitted with
//! mini-batch Adam and early stopping on a validation split; cost is a ridge least
//! squares fit whose penalty is picked on the validation split.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CostJob, CostSample, Learner, LearnerKind, SegJob, TrainReport};
use crate::cost::{boundary_density, CostMap};
use crate::error::{Error, Result};
use crate::info::{CommitteePrediction, ProbabilityMap};
use crate::metrics::Confusion;
use crate::pool::{ClassId, ImageRecord};
use crate::region::box_mean;
use crate::seeding::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuiltinConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Only pixels whose row and column are multiples of this are used for fitting and
    /// validation. Prediction is always dense.
    pub pixel_stride: usize,
    /// Fraction of feature channels zeroed per committee member.
    pub dropout: f64,
}

impl Default for BuiltinConfig {
    fn default() -> Self {
        BuiltinConfig {
            learning_rate: 0.05,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            pixel_stride: 2,
            dropout: 0.25,
        }
    }
}

impl BuiltinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || self.pixel_stride == 0 {
            return Err(Error::Config("learner rates, sizes and strides must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

fn coord(i: usize, n: usize) -> f64 {
    if n > 1 {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    } else {
        0.0
    }
}

/// Feature planes followed by row and column coordinates in `[-1, 1]`.
fn pixel_inputs(image: &ImageRecord, r: usize, c: usize, out: &mut Vec<f64>) {
    let f = image.channels();
    let base = (r * image.width() + c) * f;
    let feats = image.features.as_slice().expect("features are in standard layout");
    out.extend(feats[base..base + f].iter().map(|&v| f64::from(v)));
    out.push(coord(r, image.height()));
    out.push(coord(c, image.width()));
}

/// Per-input affine standardization fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[f64], dim: usize) -> Self {
        let n = (rows.len() / dim).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, inv_std }
    }

    pub fn apply(&self, rows: &mut [f64]) {
        let dim = self.mean.len();
        for row in rows.chunks_exact_mut(dim) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
    }
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Tracks the best validation score; stops after `patience` epochs without a strict gain.
struct EarlyStop<P> {
    patience: usize,
    best: f64,
    best_params: Option<P>,
    since_best: usize,
}

impl<P: Clone> EarlyStop<P> {
    fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: f64::NEG_INFINITY,
            best_params: None,
            since_best: 0,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, score: f64, params: &P) -> bool {
        if score > self.best {
            self.best = score;
            self.best_params = Some(params.clone());
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Multinomial logistic regression on standardized inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxRegression {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes x (dim + 1)`, bias in the last column.
    pub weights: Vec<f64>,
    pub standardizer: Standardizer,
}

impl SoftmaxRegression {
    pub fn zeros(classes: usize, standardizer: Standardizer) -> Self {
        let dim = standardizer.mean.len();
        SoftmaxRegression {
            classes,
            dim,
            weights: vec![0.0; classes * (dim + 1)],
            standardizer,
        }
    }

    #[inline]
    fn probs_into(&self, x: &[f64], out: &mut [f64]) {
        let stride = self.dim + 1;
        for (k, o) in out.iter_mut().enumerate() {
            let w = &self.weights[k * stride..(k + 1) * stride];
            *o = w[self.dim] + w[..self.dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax_in_place(out);
    }

    /// Mean cross-entropy over standardized rows `xs` and its gradient w.r.t. `weights`.
    pub fn loss_and_gradient(&self, xs: &[f64], ys: &[u16]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.weights.len()];
        let loss = self.accumulate_gradient(xs, ys, &mut grad);
        let n = ys.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    /// Adds the summed gradient into `grad` and returns the summed loss.
    fn accumulate_gradient(&self, xs: &[f64], ys: &[u16], grad: &mut [f64]) -> f64 {
        let stride = self.dim + 1;
        let mut p = vec![0.0; self.classes];
        let mut loss = 0.0;
        for (x, &y) in xs.chunks_exact(self.dim).zip(ys) {
            self.probs_into(x, &mut p);
            loss -= p[usize::from(y)].max(1e-300).ln();
            for k in 0..self.classes {
                let g = p[k] - if usize::from(y) == k { 1.0 } else { 0.0 };
                let row = &mut grad[k * stride..(k + 1) * stride];
                for (gj, xj) in row[..self.dim].iter_mut().zip(x) {
                    *gj += g * xj;
                }
                row[self.dim] += g;
            }
        }
        loss
    }

    pub fn loss(&self, xs: &[f64], ys: &[u16]) -> f64 {
        let mut p = vec![0.0; self.classes];
        let mut loss = 0.0;
        for (x, &y) in xs.chunks_exact(self.dim).zip(ys) {
            self.probs_into(x, &mut p);
            loss -= p[usize::from(y)].max(1e-300).ln();
        }
        loss / ys.len().max(1) as f64
    }

    fn predict_class(&self, x: &[f64], scratch: &mut [f64]) -> ClassId {
        self.probs_into(x, scratch);
        let mut best = 0;
        for k in 1..self.classes {
            if scratch[k] > scratch[best] {
                best = k;
            }
        }
        ClassId(best as u16)
    }

    /// Weights and biases acting on raw inputs, with `keep[j]` scaling standardized input `j`.
    fn raw_affine(&self, keep: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        let stride = self.dim + 1;
        let mut w = vec![0.0; self.classes * self.dim];
        let mut b = vec![0.0; self.classes];
        for k in 0..self.classes {
            let row = &self.weights[k * stride..(k + 1) * stride];
            b[k] = row[self.dim];
            for j in 0..self.dim {
                let scale = keep.map_or(1.0, |kp| kp[j]) * self.standardizer.inv_std[j];
                w[k * self.dim + j] = row[j] * scale;
                b[k] -= row[j] * scale * self.standardizer.mean[j];
            }
        }
        (w, b)
    }

    /// Dense posterior `(classes, H, W)`.
    pub fn predict_image(&self, image: &ImageRecord, keep: Option<&[f64]>) -> Array3<f64> {
        let (w, b) = self.raw_affine(keep);
        let (h, wd) = (image.height(), image.width());
        let f = image.channels();
        let feats = image.features.as_slice().expect("standard layout");
        let mut out = Array3::zeros((self.classes, h, wd));
        let plane = h * wd;
        let buf = out.as_slice_mut().unwrap();
        let mut z = vec![0.0; self.classes];
        for r in 0..h {
            let cr = coord(r, h);
            for c in 0..wd {
                let cc = coord(c, wd);
                let px = &feats[(r * wd + c) * f..(r * wd + c + 1) * f];
                for k in 0..self.classes {
                    let wk = &w[k * self.dim..(k + 1) * self.dim];
                    let mut acc = b[k] + wk[f] * cr + wk[f + 1] * cc;
                    for j in 0..f {
                        acc += wk[j] * f64::from(px[j]);
                    }
                    z[k] = acc;
                }
                softmax_in_place(&mut z);
                for k in 0..self.classes {
                    buf[k * plane + r * wd + c] = z[k];
                }
            }
        }
        out
    }
}

/// Linear click regressor; predictions are clamped at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRegressor {
    pub dim: usize,
    /// `dim + 1` entries, bias last.
    pub weights: Vec<f64>,
    pub standardizer: Standardizer,
    /// Ridge penalty per training row that won on validation.
    pub ridge: f64,
}

/// Candidate ridge penalties, per training row.
pub const RIDGE_GRID: [f64; 5] = [1e-6, 1e-4, 1e-2, 1.0, 100.0];

impl CostRegressor {
    /// Clicks for one standardized row, before clamping.
    #[inline]
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.weights[self.dim] + self.weights[..self.dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Least squares on standardized rows with an unpenalized bias.
    pub fn fit(xs: &[f64], ys: &[f64], standardizer: Standardizer, ridge: f64) -> Result<Self> {
        let dim = standardizer.mean.len();
        let (gram, moment) = normal_equations(xs, ys, dim);
        let weights = solve_ridge(&gram, &moment, ridge * ys.len() as f64)?;
        Ok(CostRegressor {
            dim,
            weights,
            standardizer,
            ridge,
        })
    }

    pub fn mse(&self, xs: &[f64], ys: &[f64]) -> f64 {
        let sum: f64 = xs
            .chunks_exact(self.dim)
            .zip(ys)
            .map(|(x, &y)| {
                let e = self.predict(x) - y;
                e * e
            })
            .sum();
        sum / ys.len().max(1) as f64
    }
}

/// `X^T X` and `X^T y` for rows augmented with a trailing 1.
fn normal_equations(xs: &[f64], ys: &[f64], dim: usize) -> (DMatrix<f64>, DVector<f64>) {
    let n = dim + 1;
    let mut gram = DMatrix::<f64>::zeros(n, n);
    let mut moment = DVector::<f64>::zeros(n);
    let mut row = vec![1.0; n];
    for (x, &y) in xs.chunks_exact(dim).zip(ys) {
        row[..dim].copy_from_slice(x);
        for i in 0..n {
            moment[i] += row[i] * y;
            for j in i..n {
                gram[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    (gram, moment)
}

fn solve_ridge(gram: &DMatrix<f64>, moment: &DVector<f64>, penalty: f64) -> Result<Vec<f64>> {
    let n = gram.nrows();
    let mut a = gram.clone();
    for i in 0..n - 1 {
        a[(i, i)] += penalty;
    }
    // keeps the bias row positive definite when every row is identical
    a[(n - 1, n - 1)] += 1e-9;
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Data("cost regression system is not positive definite".into()))?;
    Ok(chol.solve(moment).iter().copied().collect())
}

#[derive(Clone, Debug, Default)]
pub struct BuiltinLearner {
    config: BuiltinConfig,
    seg: Option<SoftmaxRegression>,
    cost: Option<CostRegressor>,
}

struct SegData {
    xs: Vec<f64>,
    ys: Vec<u16>,
}

impl BuiltinLearner {
    pub fn new(config: BuiltinConfig) -> Result<Self> {
        config.validate()?;
        Ok(BuiltinLearner {
            config,
            seg: None,
            cost: None,
        })
    }

    pub fn config(&self) -> &BuiltinConfig {
        &self.config
    }

    pub fn segmentation_model(&self) -> Option<&SoftmaxRegression> {
        self.seg.as_ref()
    }

    pub fn cost_model(&self) -> Option<&CostRegressor> {
        self.cost.as_ref()
    }

    fn strided(&self, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
        let s = self.config.pixel_stride;
        (0..h).step_by(s).flat_map(move |r| (0..w).step_by(s).map(move |c| (r, c)))
    }

    fn gather_segmentation(&self, job: &SegJob<'_>) -> (SegData, SegData, usize) {
        let mut train = SegData { xs: Vec::new(), ys: Vec::new() };
        let mut dim = 0;
        for s in &job.train {
            dim = s.image.channels() + 2;
            for (r, c) in self.strided(s.image.height(), s.image.width()) {
                let label = s.labels[(r, c)];
                if s.mask.0[(r, c)] && label.is_labeled() {
                    pixel_inputs(s.image, r, c, &mut train.xs);
                    train.ys.push(label.0);
                }
            }
        }
        let mut val = SegData { xs: Vec::new(), ys: Vec::new() };
        for img in &job.val.images {
            for (r, c) in self.strided(img.height(), img.width()) {
                let label = img.labels[(r, c)];
                if label.is_labeled() {
                    pixel_inputs(img, r, c, &mut val.xs);
                    val.ys.push(label.0);
                }
            }
        }
        (train, val, dim)
    }

    fn val_miou(model: &SoftmaxRegression, val: &SegData, scratch: &mut [f64]) -> f64 {
        let mut confusion = Confusion::new(model.classes);
        for (x, &y) in val.xs.chunks_exact(model.dim).zip(&val.ys) {
            confusion.add(ClassId(y), model.predict_class(x, scratch));
        }
        confusion.miou()
    }

    fn require_seg(&self) -> Result<&SoftmaxRegression> {
        self.seg
            .as_ref()
            .ok_or_else(|| Error::State("segmentation model is untrained".into()))
    }

    fn cost_inputs(&self, image: &ImageRecord, hint: &BoundaryHint, r: usize, c: usize, out: &mut Vec<f64>) {
        pixel_inputs(image, r, c, out);
        let d = hint.density[(r, c)];
        let near = hint.nearby[(r, c)];
        let class = hint.argmax[(r, c)].index();
        out.push(d);
        out.push(near);
        for (k, share) in hint.shares.iter().enumerate() {
            let on = if k == class { 1.0 } else { 0.0 };
            let f = share[(r, c)];
            out.push(on * near);
            out.push(f);
            out.push(f * (1.0 - f));
        }
    }

    fn boundary_hint(&self, seg: &SoftmaxRegression, image: &ImageRecord) -> BoundaryHint {
        let argmax = ProbabilityMap::new_unchecked(image.id.clone(), seg.predict_image(image, None)).argmax();
        let density = boundary_density(&argmax);
        let shares = (0..seg.classes)
            .map(|k| {
                let on = argmax.mapv(|c| if c.index() == k { 1.0 } else { 0.0 });
                box_mean(&on, HINT_RADIUS)
            })
            .collect();
        BoundaryHint {
            nearby: box_mean(&density, HINT_RADIUS),
            density,
            argmax,
            shares,
        }
    }

    fn gather_cost(&self, samples: &[CostSample<'_>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let seg = self.require_seg()?;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in samples {
            if s.clicks.dim() != (s.image.height(), s.image.width()) {
                return Err(Error::Data(format!("{}: click target shape mismatch", s.image.id)));
            }
            let hint = self.boundary_hint(seg, s.image);
            for (r, c) in self.strided(s.image.height(), s.image.width()) {
                if s.mask.is_none_or(|m| m.0[(r, c)]) {
                    self.cost_inputs(s.image, &hint, r, c, &mut xs);
                    ys.push(s.clicks[(r, c)]);
                }
            }
        }
        Ok((xs, ys))
    }
}

const HINT_RADIUS: usize = 4;

/// Predicted labels of one image and the derived boundary statistics.
struct BoundaryHint {
    argmax: Array2<ClassId>,
    density: Array2<f64>,
    /// `density` averaged over the hint window.
    nearby: Array2<f64>,
    /// Per class, the fraction of the hint window predicted as that class.
    shares: Vec<Array2<f64>>,
}

impl Learner for BuiltinLearner {
    fn kind(&self) -> LearnerKind {
        LearnerKind::Builtin
    }

    fn is_trained(&self) -> bool {
        self.seg.is_some()
    }

    fn train_segmentation(&mut self, job: &SegJob<'_>) -> Result<TrainReport> {
        let (mut train, mut val, dim) = self.gather_segmentation(job);
        if train.ys.is_empty() {
            return Err(Error::State("no labeled pixels to train on".into()));
        }
        if let Some(bad) = train.ys.iter().find(|&&y| usize::from(y) >= job.num_classes) {
            return Err(Error::Data(format!("label {bad} outside {} classes", job.num_classes)));
        }
        let mut seen = vec![false; job.num_classes];
        train.ys.iter().for_each(|&y| seen[usize::from(y)] = true);
        if let Some(missing) = seen.iter().position(|s| !s) {
            log::warn!("class {missing} has no labeled pixels; its predictions will degrade");
        }

        let standardizer = Standardizer::fit(&train.xs, dim);
        standardizer.apply(&mut train.xs);
        standardizer.apply(&mut val.xs);
        let mut model = SoftmaxRegression::zeros(job.num_classes, standardizer);
        let mut adam = Adam::new(self.config.learning_rate, model.weights.len());
        let mut rng = rng_for(job.seed, &[]);
        let mut order: Vec<u32> = (0..train.ys.len() as u32).collect();
        let mut grad = vec![0.0; model.weights.len()];
        let mut scratch = vec![0.0; job.num_classes];
        let mut xb = Vec::with_capacity(self.config.batch_size * dim);
        let mut yb = Vec::with_capacity(self.config.batch_size);
        let mut stop = EarlyStop::new(self.config.patience);
        let mut report = TrainReport::default();

        for epoch in 1..=self.config.max_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.config.batch_size) {
                xb.clear();
                yb.clear();
                for &i in chunk {
                    let i = i as usize;
                    xb.extend_from_slice(&train.xs[i * dim..(i + 1) * dim]);
                    yb.push(train.ys[i]);
                }
                grad.iter_mut().for_each(|g| *g = 0.0);
                model.accumulate_gradient(&xb, &yb, &mut grad);
                let n = chunk.len() as f64;
                grad.iter_mut().for_each(|g| *g /= n);
                adam.step(&mut model.weights, &grad);
            }
            report.epochs_run = epoch;
            report.loss_history.push(model.loss(&train.xs, &train.ys));
            let score = if val.ys.is_empty() {
                -report.loss_history[epoch - 1]
            } else {
                Self::val_miou(&model, &val, &mut scratch)
            };
            if stop.observe(score, &model.weights) {
                report.converged = true;
                break;
            }
        }
        if let Some(best) = stop.best_params {
            model.weights = best;
        }
        if !val.ys.is_empty() {
            report.best_val_miou = Some(stop.best);
        }
        self.seg = Some(model);
        self.cost = None;
        Ok(report)
    }

    fn predict_probs(&self, image: &ImageRecord) -> Result<ProbabilityMap<f64>> {
        let seg = self.require_seg()?;
        Ok(ProbabilityMap::new_unchecked(image.id.clone(), seg.predict_image(image, None)))
    }

    fn predict_committee(&self, image: &ImageRecord, members: usize, seed: u64) -> Result<CommitteePrediction<f64>> {
        let seg = self.require_seg()?;
        if members < 2 {
            return Err(Error::Config(format!("committee size {members} < 2")));
        }
        let f = image.channels();
        let p = self.config.dropout;
        let n_drop = ((p * f as f64).round() as usize).min(f);
        let survivor_scale = 1.0 / (1.0 - p);
        let maps = (0..members)
            .map(|k| {
                let mut rng = rng_for(seed, &[k as u64]);
                let mut keep = vec![1.0; seg.dim];
                if n_drop > 0 {
                    keep[..f].iter_mut().for_each(|v| *v = survivor_scale);
                    for j in sample(&mut rng, f, n_drop) {
                        keep[j] = 0.0;
                    }
                }
                ProbabilityMap::new_unchecked(image.id.clone(), seg.predict_image(image, Some(&keep)))
            })
            .collect();
        CommitteePrediction::new(maps)
    }

    fn train_cost(&mut self, job: &CostJob<'_>) -> Result<TrainReport> {
        let (mut xs, ys) = self.gather_cost(&job.train)?;
        if ys.is_empty() {
            return Err(Error::State("no labeled pixels for cost training".into()));
        }
        let (mut vxs, vys) = self.gather_cost(&job.val)?;
        let dim = xs.len() / ys.len();
        let standardizer = Standardizer::fit(&xs, dim);
        standardizer.apply(&mut xs);
        standardizer.apply(&mut vxs);
        let (gram, moment) = normal_equations(&xs, &ys, dim);
        let mut best: Option<(f64, CostRegressor)> = None;
        for ridge in RIDGE_GRID {
            let model = CostRegressor {
                dim,
                weights: solve_ridge(&gram, &moment, ridge * ys.len() as f64)?,
                standardizer: standardizer.clone(),
                ridge,
            };
            let score = if vys.is_empty() { model.mse(&xs, &ys) } else { model.mse(&vxs, &vys) };
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, model));
            }
        }
        let (val_mse, model) = best.expect("ridge grid is not empty");
        let report = TrainReport {
            epochs_run: 1,
            best_val_mse: Some(val_mse),
            converged: true,
            loss_history: vec![model.mse(&xs, &ys)],
            ..TrainReport::default()
        };
        self.cost = Some(model);
        Ok(report)
    }

    fn predict_cost(&self, image: &ImageRecord) -> Result<CostMap> {
        let seg = self.require_seg()?;
        let cost = self
            .cost
            .as_ref()
            .ok_or_else(|| Error::State("cost model is untrained".into()))?;
        let hint = self.boundary_hint(seg, image);
        let (h, w) = (image.height(), image.width());
        let mut x = Vec::with_capacity(cost.dim);
        let values = Array2::from_shape_fn((h, w), |(r, c)| {
            x.clear();
            self.cost_inputs(image, &hint, r, c, &mut x);
            cost.standardizer.apply(&mut x);
            cost.predict(&x).max(0.0)
        });
        CostMap::new(image.id.clone(), values)
    }
}

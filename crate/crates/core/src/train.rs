//! AdamW training of the joint objective with a warm-up multi-step schedule,
//! random crops simulated through the optical model, evaluation, metric
//! logging and resumable checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cassi::{self, CodedAperture, DispersionSpec, HsiCube};
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::RunConfig;
use crate::data::{self, Dataset, Sample};
use crate::detection::{self, Annotation, BBox, Detection};
use crate::error::{Error, Result};
use crate::metrics::{self, LossReport, MetricRow, CHARBONNIER_EPS};
use crate::network::FunModel;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub warmup: u64,
    pub milestones: Vec<u64>,
    pub decay: f64,
    /// Weight of the reconstruction term.
    pub lambda: f64,
    /// Train the detection terms; off gives a reconstruction-only run.
    pub detection: bool,
    pub batch: usize,
    pub crop: usize,
    /// Detector noise standard deviation.
    pub sigma: f64,
    pub dispersion_step: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            steps: 3000,
            warmup: 500,
            milestones: vec![2000, 2600],
            decay: 0.1,
            lambda: 5.0,
            detection: true,
            batch: 2,
            crop: 32,
            sigma: 0.01,
            dispersion_step: 1,
            clip_norm: 1.0,
            seed: 0,
            eval_every: 500,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight decay nonnegative".into());
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad(format!("decay factor {} must lie in (0, 1)", self.decay));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing".into());
        }
        let first = self.milestones.first().copied().unwrap_or(self.steps);
        if !(self.warmup < first && first <= self.steps) || self.milestones.last().is_some_and(|&m| m >= self.steps) {
            return bad(format!(
                "need warmup ({}) < first milestone < total steps ({})",
                self.warmup, self.steps
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite nonnegative number".into());
        }
        if !self.detection && self.lambda == 0.0 {
            return bad("with detection off, lambda must be positive".into());
        }
        if self.batch == 0 || self.crop == 0 || !self.crop.is_multiple_of(8) {
            return bad(format!("batch must be positive and crop ({}) a multiple of 8", self.crop));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !(self.clip_norm >= 0.0) {
            return bad("sigma and clip norm must be nonnegative".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn dispersion(&self) -> DispersionSpec {
        DispersionSpec::new(self.dispersion_step)
    }
}

/// Learning rate at 0-based `step`: a linear ramp reaching the base rate at
/// `warmup`, then one decay factor per milestone passed.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let passed = cfg.milestones.iter().filter(|&&m| step >= m).count();
    cfg.lr * cfg.decay.powi(passed as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter and the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay.
/// A missing gradient counts as zero.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Vec<T>>],
    state: &mut AdamState<T>,
    opt: &AdamW,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - opt.beta1.powi(state.t as i32);
    let c2 = 1.0 - opt.beta2.powi(state.t as i32);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = grads[k].as_deref();
        let w = params.get_mut(id).data_mut();
        if g.is_some_and(|g| g.len() != w.len()) {
            return Err(Error::Contract(format!("gradient {k} has the wrong length")));
        }
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for i in 0..w.len() {
            let gi = g.map_or(0.0, |g| g[i].to_f64().unwrap_or(f64::NAN));
            let mi = opt.beta1 * m[i].to_f64().unwrap_or(0.0) + (1.0 - opt.beta1) * gi;
            let vi = opt.beta2 * v[i].to_f64().unwrap_or(0.0) + (1.0 - opt.beta2) * gi * gi;
            m[i] = T::from_f64_lossy(mi);
            v[i] = T::from_f64_lossy(vi);
            let wi = w[i].to_f64().unwrap_or(f64::NAN);
            let step = (mi / c1) / ((vi / c2).sqrt() + opt.eps);
            w[i] = T::from_f64_lossy(wi - lr * opt.weight_decay * wi - lr * step);
        }
    }
    Ok(())
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Network inputs and targets for one step.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Shift-back inputs `[N, c, c, bands]`.
    pub input: Tensor<f32>,
    pub truth: Tensor<f32>,
    pub annotations: Vec<Vec<Annotation>>,
}

/// Boxes of a crop window in crop coordinates; boxes narrower or shorter
/// than 2 px after clipping are dropped.
pub fn crop_annotations(anns: &[Annotation], top: usize, left: usize, size: usize) -> Vec<Annotation> {
    let (x0, y0) = (left as f64, top as f64);
    let (x1, y1) = (x0 + size as f64, y0 + size as f64);
    anns.iter()
        .filter_map(|a| {
            let b = &a.bbox;
            let clipped = BBox::new(b.x_min.max(x0), b.y_min.max(y0), b.x_max.min(x1), b.y_max.min(y1));
            (clipped.width() >= 2.0 && clipped.height() >= 2.0).then(|| Annotation {
                class_id: a.class_id,
                bbox: clipped.translate(-x0, -y0),
            })
        })
        .collect()
}

fn stack(cubes: &[HsiCube<f32>]) -> Result<Tensor<f32>> {
    let c = &cubes[0];
    let data: Vec<f32> = cubes.iter().flat_map(|c| c.data().iter().copied()).collect();
    Tensor::new(&[cubes.len(), c.height(), c.width(), c.bands()], data)
}

/// Draw `cfg.batch` random crops, each measured through its own mask crop
/// with fresh detector noise.
pub fn sample_batch(rng: &mut ChaCha8Rng, data: &Dataset, cfg: &TrainConfig) -> Result<Batch> {
    if data.train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let c = cfg.crop;
    let mut inputs = Vec::with_capacity(cfg.batch);
    let mut truths = Vec::with_capacity(cfg.batch);
    let mut annotations = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let s = &data.train[rng.gen_range(0..data.train.len())];
        let (h, w) = (s.cube.height(), s.cube.width());
        if c > h || c > w {
            return Err(Error::Contract(format!("crop {c} exceeds the {h}x{w} scene")));
        }
        let top = rng.gen_range(0..=h - c);
        let left = rng.gen_range(0..=w - c);
        let truth = s.cube.crop(top, left, c, c)?;
        let mask = data.mask.crop(top, left, c, c)?;
        let y = cassi::forward(&truth, &mask, cfg.dispersion(), cfg.sigma, rng.gen())?;
        inputs.push(cassi::shift_back(&y, cfg.dispersion(), truth.bands())?);
        truths.push(truth);
        annotations.push(crop_annotations(&s.annotations, top, left, c));
    }
    Ok(Batch {
        input: stack(&inputs)?,
        truth: stack(&truths)?,
        annotations,
    })
}

/// Objective value and parameter gradients for one batch.
pub fn loss_and_grads<T: Scalar>(
    model: &FunModel,
    params: &ParamStore<T>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(LossReport, Vec<Option<Vec<T>>>)> {
    let mut tape = Tape::with_params(params);
    let input = tape.constant(batch.input.cast());
    let truth = tape.constant(batch.truth.cast());
    let out = model.forward(&mut tape, input)?;
    let recon = tape.charbonnier(out.reconstruction, truth, CHARBONNIER_EPS)?;
    let (total, report) = if cfg.detection {
        let det = detection::head_forward(&mut tape, &model.head, &model.config.head, &out.pyramid)?;
        let targets = detection::assign_targets(&batch.annotations, &det.geometry, model.config.num_classes);
        let losses = detection::detection_loss(&mut tape, &det, &targets, &model.config.head)?;
        metrics::total_loss(&mut tape, &losses, recon, cfg.lambda)?
    } else {
        let total = tape.scale(recon, cfg.lambda);
        let recon_v = tape.value(recon).item()?.to_f64().unwrap_or(f64::NAN);
        let report = LossReport {
            total: cfg.lambda * recon_v,
            recon: recon_v,
            lambda: cfg.lambda,
            ..LossReport::default()
        };
        (total, report)
    };
    if !report.total.is_finite() {
        return Ok((report, Vec::new()));
    }
    tape.backward(total)?;
    let grads = tape.param_grads().into_iter().map(|g| g.map(<[T]>::to_vec)).collect();
    Ok((report, grads))
}

/// One row of the append-only metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRow {
    Train {
        step: u64,
        lr: f64,
        grad_norm: f64,
        #[serde(flatten)]
        loss: LossReport,
    },
    Eval {
        step: u64,
        #[serde(flatten)]
        summary: EvalSummary,
    },
}

/// Split-level averages of the model and of the shift-back baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenes: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
    pub map: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    pub baseline_sam: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub rows: Vec<MetricRow>,
    pub baseline_rows: Vec<MetricRow>,
    pub per_class_ap: Vec<Option<f64>>,
    pub detections: Vec<Vec<Detection>>,
}

/// Noise seed of the evaluation measurement of a scene.
pub fn eval_noise_seed(scene_seed: u64) -> u64 {
    data::scene_seed(scene_seed, 0x5eed)
}

/// Reconstruction and detections of one scene from its measurement.
pub fn infer(
    model: &FunModel,
    params: &ParamStore<f32>,
    y: &cassi::Measurement<f32>,
    d: DispersionSpec,
) -> Result<(HsiCube<f32>, Vec<Detection>)> {
    let h = cassi::shift_back(y, d, model.config.bands)?;
    let (rows, cols, bands) = (h.height(), h.width(), h.bands());
    let mut tape = Tape::with_params(params);
    let input = tape.constant(h.to_tensor().reshape(&[1, rows, cols, bands])?);
    let (out, det) = model.forward_with_head(&mut tape, input)?;
    let recon = HsiCube::from_tensor(tape.value(out.reconstruction))?;
    let preds = detection::predictions(&tape, &det);
    let dets = detection::decode(&preds[0], (rows, cols), &model.config.head);
    Ok((recon, dets))
}

/// Reconstruction metrics and mAP@0.5 over `samples`, each measured through
/// the full mask with per-scene fixed noise.
pub fn evaluate(
    model: &FunModel,
    params: &ParamStore<f32>,
    samples: &[Sample],
    mask: &CodedAperture<f32>,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let d = cfg.dispersion();
    let mut rows = Vec::with_capacity(samples.len());
    let mut baseline_rows = Vec::with_capacity(samples.len());
    let mut detections = Vec::with_capacity(samples.len());
    for s in samples {
        let y = cassi::forward(&s.cube, mask, d, cfg.sigma, eval_noise_seed(s.seed))?;
        let h = cassi::shift_back(&y, d, s.cube.bands())?;
        let (recon, dets) = infer(model, params, &y, d)?;
        rows.push(MetricRow::compute(s.id.clone(), &recon, &s.cube)?);
        baseline_rows.push(MetricRow::compute(s.id.clone(), &h, &s.cube)?);
        detections.push(dets);
    }
    let anns: Vec<Vec<Annotation>> = samples.iter().map(|s| s.annotations.clone()).collect();
    let map = detection::map_at_50(&detections, &anns, model.config.num_classes)?;
    let n = rows.len().max(1) as f64;
    let mean = |rows: &[MetricRow], f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let summary = EvalSummary {
        scenes: rows.len(),
        psnr: mean(&rows, |r| r.psnr),
        ssim: mean(&rows, |r| r.ssim),
        sam: mean(&rows, |r| r.sam),
        map: map.map,
        baseline_psnr: mean(&baseline_rows, |r| r.psnr),
        baseline_ssim: mean(&baseline_rows, |r| r.ssim),
        baseline_sam: mean(&baseline_rows, |r| r.sam),
    };
    Ok(EvalReport {
        summary,
        rows,
        baseline_rows,
        per_class_ap: map.per_class,
        detections,
    })
}

/// Mean training loss over the `window` steps ending at `step` (fewer at
/// the start of the log).
pub fn moving_average(log: &[LogRow], step: u64, window: u64) -> Option<f64> {
    let lo = step.saturating_sub(window);
    let vals: Vec<f64> = log
        .iter()
        .filter_map(|r| match r {
            LogRow::Train { step: s, loss, .. } if *s > lo && *s <= step => Some(loss.total),
            _ => None,
        })
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Files written by a training run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const CONFIG: &'static str = "config.toml";
    pub const LAST: &'static str = "last.func";

    pub fn create(root: &Path) -> Result<RunDir> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("samples"))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step:06}.func"))
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.root.join(Self::LAST)
    }

    pub fn sample_path(&self, step: u64) -> PathBuf {
        self.root.join("samples").join(format!("val0_step_{step:06}.funh"))
    }

    fn append(&self, row: &LogRow) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.root.join(Self::METRICS))?;
        let line = serde_json::to_string(row).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}

/// Read a metrics log written by [`RunDir`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("metrics log: {e}"))))
        .collect()
}

/// Model, parameters, optimizer state and sampling stream of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: FunModel,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    rng: ChaCha8Rng,
    step: u64,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    /// Fresh run; model weights come from `train.seed`, the crop stream from
    /// a seed derived from it.
    pub fn new(config: RunConfig) -> Result<Trainer> {
        config.validate()?;
        let (model, params) = FunModel::build::<f32>(&config.model, config.train.seed)?;
        let adam = AdamState::new(&params);
        let rng = ChaCha8Rng::seed_from_u64(data::scene_seed(config.train.seed, 0xc0de));
        Ok(Trainer {
            config,
            model,
            params,
            adam,
            rng,
            step: 0,
            last_checkpoint: None,
        })
    }

    /// Number of completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Most recent checkpoint written by [`Trainer::run`].
    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    /// Sample a batch, compute the objective and apply one update.
    pub fn train_step(&mut self, data: &Dataset) -> Result<LogRow> {
        let cfg = &self.config.train;
        let batch = sample_batch(&mut self.rng, data, cfg)?;
        let (loss, mut grads) = loss_and_grads(&self.model, &self.params, &batch, cfg)?;
        let grad_norm = if loss.total.is_finite() {
            clip_grad_norm(&mut grads, cfg.clip_norm)
        } else {
            f64::NAN
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { step: self.step, last_checkpoint: None });
        }
        let lr = lr_at(self.step, cfg);
        adamw_step(&mut self.params, &grads, &mut self.adam, &cfg.optimizer(), lr)?;
        self.step += 1;
        Ok(LogRow::Train { step: self.step, lr, grad_norm, loss })
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalReport> {
        evaluate(&self.model, &self.params, &data.val, &data.mask, &self.config.train)
    }

    /// Train until `until` steps are complete (capped at the configured
    /// total), evaluating and checkpointing at the configured intervals.
    pub fn run(&mut self, data: &Dataset, until: u64, run_dir: Option<&RunDir>) -> Result<Vec<LogRow>> {
        let until = until.min(self.config.train.steps);
        let mut log = Vec::new();
        while self.step < until {
            let row = match self.train_step(data) {
                Err(Error::NonFinite { step, .. }) => {
                    let last_checkpoint = self.last_checkpoint.clone();
                    return Err(Error::NonFinite { step, last_checkpoint });
                }
                other => other?,
            };
            if let Some(dir) = run_dir {
                dir.append(&row)?;
            }
            log.push(row);
            let cfg = &self.config.train;
            let done = self.step == cfg.steps;
            if (cfg.eval_every > 0 && self.step.is_multiple_of(cfg.eval_every)) || done {
                let report = self.evaluate(data)?;
                let row = LogRow::Eval { step: self.step, summary: report.summary };
                if let Some(dir) = run_dir {
                    dir.append(&row)?;
                    if let Some(s) = data.val.first() {
                        let y = cassi::forward(&s.cube, &data.mask, cfg.dispersion(), cfg.sigma, eval_noise_seed(s.seed))?;
                        let (recon, _) = infer(&self.model, &self.params, &y, cfg.dispersion())?;
                        data::save_cube(&dir.sample_path(self.step), &recon)?;
                    }
                }
                log.push(row);
            }
            if let Some(dir) = run_dir {
                if (cfg.checkpoint_every > 0 && self.step.is_multiple_of(cfg.checkpoint_every)) || done {
                    let ck = self.checkpoint();
                    let path = dir.checkpoint_path(self.step);
                    ck.save(&path)?;
                    ck.save(&dir.last_checkpoint())?;
                    self.last_checkpoint = Some(path);
                }
            }
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            step: self.step,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            config: self.config.to_toml(),
            tensors: Vec::new(),
        };
        for (k, id) in self.params.ids().enumerate() {
            let name = self.params.name(id);
            ck.push(format!("param/{name}"), self.params.get(id));
            ck.push(format!("adam_m/{name}"), &self.adam.m[k]);
            ck.push(format!("adam_v/{name}"), &self.adam.v[k]);
        }
        ck
    }

    /// Rebuild a run from a checkpoint; continuing it reproduces the
    /// uninterrupted run bit for bit.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Trainer> {
        let config = RunConfig::parse(&ck.config)?;
        let mut t = Trainer::new(config)?;
        let ids: Vec<_> = t.params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let name = t.params.name(id).to_string();
            let fetch = |prefix: &str| {
                ck.get(&format!("{prefix}/{name}"))
                    .map(|s| s.to_tensor::<f32>())
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}/{name}")))
            };
            let (p, m, v) = (fetch("param")?, fetch("adam_m")?, fetch("adam_v")?);
            let shape = t.params.get(id).shape().to_vec();
            if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                return Err(Error::Format(format!("checkpoint moments of {name} have the wrong shape")));
            }
            t.params
                .set(id, p)
                .map_err(|e| Error::Format(format!("checkpoint parameter {name}: {e}")))?;
            t.adam.m[k] = m;
            t.adam.v[k] = v;
        }
        if ck.tensors.len() != 3 * t.params.len() {
            return Err(Error::Format("checkpoint has tensors the model does not know".into()));
        }
        t.adam.t = ck.step;
        t.step = ck.step;
        let mut rng = ChaCha8Rng::from_seed(ck.rng.seed);
        rng.set_stream(ck.rng.stream);
        rng.set_word_pos(ck.rng.word_pos);
        t.rng = rng;
        Ok(t)
    }
}

#[cfg(test)]
#[path = "train_tests.rs"]
mod tests;

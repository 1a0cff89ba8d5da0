//! Noise-prediction training: stage-aware freezing, AdamW and the staged
//! spatial-then-temporal schedule.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape};
use crate::conditioning::ConditionInput;
use crate::data::io::write_atomic;
use crate::error::{Result, VdtError};
use crate::model::network::{build_graph, patch_input, GraphInput};
use crate::model::{patchify, CondScheme, ForwardOptions, ParamGroup, ParamStore, Vdt};
use crate::schedule::{add_noise, DiffusionSchedule};
use crate::LatentClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Single frames, temporal attention bypassed and frozen.
    #[serde(alias = "spatial")]
    SpatialOnly,
    /// Only temporal attention is trained.
    #[serde(alias = "temporal")]
    TemporalOnly,
    Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::SpatialOnly => "spatial_only",
            Stage::TemporalOnly => "temporal_only",
            Stage::Joint => "joint",
        }
    }

    pub fn forward_options(self) -> ForwardOptions {
        ForwardOptions {
            bypass_temporal: self == Stage::SpatialOnly,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = VdtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" | "spatial_only" => Ok(Stage::SpatialOnly),
            "temporal" | "temporal_only" => Ok(Stage::TemporalOnly),
            "joint" => Ok(Stage::Joint),
            other => Err(VdtError::InvalidConfig(format!("unknown stage `{other}`"))),
        }
    }
}

fn default_weight_decay() -> f64 {
    0.0
}

/// Learning rate over a stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` at the first step down to zero after the last.
    Cosine,
}

impl LrSchedule {
    /// Rate for 1-based `step` of `steps`.
    pub fn at(self, lr: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let frac = (step - 1) as f64 / steps as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage: Stage,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub cond_scheme: CondScheme,
    /// Drives clip selection, timesteps and noise.
    pub seed: u64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

impl TrainPlan {
    pub fn validate(&self, model: &Vdt) -> Result<()> {
        if self.cond_scheme != model.config.cond_scheme {
            return Err(VdtError::InvalidConfig(format!(
                "plan uses scheme `{}` but the model was built for `{}`",
                self.cond_scheme.as_str(),
                model.config.cond_scheme.as_str()
            )));
        }
        if self.batch == 0 {
            return Err(VdtError::InvalidConfig("batch must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(VdtError::InvalidConfig(
                "lr must be > 0 and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Names of the parameters trained in `stage`.
pub fn freeze_mask(store: &ParamStore, stage: Stage) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for p in store.iter() {
        let group = ParamGroup::from_name(&p.name)
            .ok_or_else(|| VdtError::UntaggedParam(p.name.clone()))?;
        let temporal = group == ParamGroup::TemporalAttn;
        let keep = match stage {
            Stage::SpatialOnly => !temporal,
            Stage::TemporalOnly => temporal,
            Stage::Joint => true,
        };
        if keep {
            out.insert(p.name.clone());
        }
    }
    Ok(out)
}

/// Set the `trainable` flags of `store` for `stage`.
pub fn apply_stage(store: &mut ParamStore, stage: Stage) -> Result<()> {
    let mask = freeze_mask(store, stage)?;
    for p in store.iter_mut() {
        p.trainable = mask.contains(&p.name);
    }
    Ok(())
}

/// One noised training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x0: LatentClip,
    pub cond: Option<LatentClip>,
    pub t: usize,
    pub eps: LatentClip,
}

fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> LatentClip {
    LatentClip::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Frames a clip must have for `stage` under `model`'s configuration.
pub fn frames_needed(model: &Vdt, stage: Stage) -> usize {
    let cfg = &model.config;
    match stage {
        Stage::SpatialOnly => 1,
        _ if cfg.cond_scheme.is_conditional() => cfg.cond_frames + cfg.frames,
        _ => cfg.frames,
    }
}

/// Cut a window from `clip` and draw `(t, eps)`. Stage 1 takes one random
/// frame; later stages take `K` conditional frames followed by `F` targets.
pub fn sample_example(
    model: &Vdt,
    clip: &LatentClip,
    stage: Stage,
    s: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    let need = frames_needed(model, stage);
    let total = clip.dim().0;
    if total < need {
        return Err(VdtError::InvalidInput(format!(
            "clip has {total} frames, stage needs {need}"
        )));
    }
    let start = rng.random_range(0..=total - need);
    let window = clip.slice(s![start..start + need, .., .., ..]);
    let (x0, cond) = if stage != Stage::SpatialOnly && model.config.cond_scheme.is_conditional() {
        let k = model.config.cond_frames;
        (
            window.slice(s![k.., .., .., ..]).to_owned(),
            Some(window.slice(s![..k, .., .., ..]).to_owned()),
        )
    } else {
        (window.to_owned(), None)
    };
    let t = rng.random_range(1..=s.steps());
    let eps = randn(rng, x0.dim());
    Ok(Example { x0, cond, t, eps })
}

/// Loss and per-parameter gradients (indexed like the store; `None` for
/// frozen or unused parameters).
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<Option<Mat>>,
}

impl StepOutput {
    /// Names with a gradient.
    pub fn grad_names<'a>(&'a self, store: &'a ParamStore) -> impl Iterator<Item = &'a str> {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(move |(i, _)| store.by_index(i).name.as_str())
    }
}

/// `simple_loss` of one example and its gradient w.r.t. trainable parameters.
pub fn example_loss_and_grads(
    model: &Vdt,
    ex: &Example,
    opts: ForwardOptions,
    s: &DiffusionSchedule,
) -> Result<StepOutput> {
    let cfg = &model.config;
    let xt = add_noise(s, &ex.x0, &ex.eps, ex.t)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let xv = patch_input(&mut tape, cfg, &xt, false)?;
    let cond = match &ex.cond {
        Some(c) => {
            let c = ConditionInput::new(c.clone())?;
            Some((patch_input(&mut tape, cfg, &c.latent, false)?, c.frames()))
        }
        None => None,
    };
    let out = build_graph(
        &mut tape,
        &bound,
        cfg,
        GraphInput {
            xt: xv,
            frames: xt.dim().0,
            cond,
            t: ex.t,
        },
        opts,
    )?;
    let target = patchify(&ex.eps, cfg.patch)?.to_rows();
    let loss = tape.mse(out.eps, target, None);
    let value = tape.scalar(loss);
    let mut g = tape.backward(loss);
    let grads = bound.vars().iter().map(|&v| g.take(v)).collect();
    Ok(StepOutput { loss: value, grads })
}

/// Mean loss and gradients over `examples`, reduced in index order.
pub fn batch_loss_and_grads(
    model: &Vdt,
    examples: &[Example],
    opts: ForwardOptions,
    s: &DiffusionSchedule,
) -> Result<StepOutput> {
    if examples.is_empty() {
        return Err(VdtError::InvalidInput("empty batch".into()));
    }
    let parts = examples
        .par_iter()
        .map(|ex| example_loss_and_grads(model, ex, opts, s))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / examples.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Option<Mat>> = vec![None; model.params.len()];
    for part in parts {
        loss += part.loss;
        for (acc, g) in grads.iter_mut().zip(part.grads) {
            if let Some(g) = g {
                match acc {
                    Some(a) => *a += &g,
                    None => *acc = Some(g),
                }
            }
        }
    }
    for g in grads.iter_mut().flatten() {
        *g *= scale;
    }
    Ok(StepOutput {
        loss: loss * scale,
        grads,
    })
}

/// Draw one example per clip of `batch` and evaluate loss and gradients.
/// Trainability comes from the flags on `model.params`.
pub fn training_step(
    model: &Vdt,
    batch: &[LatentClip],
    s: &DiffusionSchedule,
    plan: &TrainPlan,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    plan.validate(model)?;
    let examples = batch
        .iter()
        .map(|clip| sample_example(model, clip, plan.stage, s, rng))
        .collect::<Result<Vec<_>>>()?;
    batch_loss_and_grads(model, &examples, plan.stage.forward_options(), s)
}

/// Adam with decoupled weight decay. Moment buffers exist only for
/// parameters that have received a gradient.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    moments: Vec<Option<(Mat, Mat)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: vec![None; params],
        }
    }

    /// Scalars holding optimiser state.
    pub fn state_scalars(&self) -> usize {
        self.moments.iter().flatten().map(|(m, _)| m.len()).sum()
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>]) {
        self.step += 1;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.by_index_mut(i);
            if p.trainable {
                self.update(i, &mut p.value, g);
            }
        }
    }

    /// Same update for free-standing matrices, `grads[i]` belonging to
    /// `values[i]`.
    pub fn step_mats(&mut self, values: &mut [Mat], grads: &[Option<Mat>]) {
        self.step += 1;
        for (i, (w, g)) in values.iter_mut().zip(grads).enumerate() {
            if let Some(g) = g {
                self.update(i, w, g);
            }
        }
    }

    fn update(&mut self, i: usize, value: &mut Mat, g: &Mat) {
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        let (m, v) = self.moments[i]
            .get_or_insert_with(|| (Mat::zeros(g.raw_dim()), Mat::zeros(g.raw_dim())));
        ndarray::Zip::from(value)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * wd * *w;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
    }
}

/// Losses of one stage, one entry per step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub stage: Option<Stage>,
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(out, "{},{l}", i + 1).expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    /// Mean of the last `window` losses.
    pub fn tail_mean(&self, window: usize) -> f64 {
        let w = window.clamp(1, self.losses.len().max(1));
        let tail = &self.losses[self.losses.len().saturating_sub(w)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }

    /// Mean of the first `window` losses.
    pub fn head_mean(&self, window: usize) -> f64 {
        let w = window.clamp(1, self.losses.len().max(1));
        let head = &self.losses[..w.min(self.losses.len())];
        head.iter().sum::<f64>() / head.len().max(1) as f64
    }
}

fn batch_stats(batch: &[LatentClip]) -> String {
    let vals: Vec<f64> = batch.iter().flat_map(|c| c.iter().copied()).collect();
    let n = vals.len().max(1) as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let (lo, hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    format!(
        "batch of {} clips: mean {mean:.4e}, std {:.4e}, min {lo:.4e}, max {hi:.4e}, non-finite inputs {}",
        batch.len(),
        var.sqrt(),
        vals.iter().filter(|v| !v.is_finite()).count()
    )
}

/// Run one stage in place and return its loss curve.
pub fn train_stage(
    model: &mut Vdt,
    dataset: &[LatentClip],
    s: &DiffusionSchedule,
    plan: &TrainPlan,
) -> Result<LossCurve> {
    plan.validate(model)?;
    if dataset.is_empty() {
        return Err(VdtError::InvalidInput("empty dataset".into()));
    }
    let need = frames_needed(model, plan.stage);
    if let Some(short) = dataset.iter().position(|c| c.dim().0 < need) {
        return Err(VdtError::InvalidInput(format!(
            "clip {short} has {} frames, stage `{}` needs {need}",
            dataset[short].dim().0,
            plan.stage.as_str()
        )));
    }
    apply_stage(&mut model.params, plan.stage)?;
    let mut opt = AdamW::new(plan.lr, plan.weight_decay, model.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut curve = LossCurve {
        stage: Some(plan.stage),
        losses: Vec::with_capacity(plan.steps),
    };
    for step in 1..=plan.steps {
        let batch: Vec<LatentClip> = (0..plan.batch)
            .map(|_| dataset[rng.random_range(0..dataset.len())].clone())
            .collect();
        let out = training_step(model, &batch, s, plan, &mut rng)?;
        if !out.loss.is_finite() {
            return Err(VdtError::NonFiniteLoss {
                step,
                loss: out.loss,
                stats: batch_stats(&batch),
            });
        }
        opt.lr = plan.lr_schedule.at(plan.lr, step, plan.steps);
        opt.step(&mut model.params, &out.grads);
        curve.losses.push(out.loss);
    }
    model.params.set_all_trainable(true);
    Ok(curve)
}

/// Execute `plans` in order. A stage that follows a spatial-only stage starts
/// from freshly initialised temporal attention whose output projection is
/// zero, so the network initially acts frame by frame.
pub fn run_training(
    model: &mut Vdt,
    plans: &[TrainPlan],
    dataset: &[LatentClip],
    s: &DiffusionSchedule,
) -> Result<Vec<LossCurve>> {
    run_training_from(model, plans, dataset, s, None)
}

/// [`run_training`] continuing a model last trained by stage `previous`.
pub fn run_training_from(
    model: &mut Vdt,
    plans: &[TrainPlan],
    dataset: &[LatentClip],
    s: &DiffusionSchedule,
    mut previous: Option<Stage>,
) -> Result<Vec<LossCurve>> {
    for plan in plans {
        plan.validate(model)?;
    }
    let mut curves = Vec::with_capacity(plans.len());
    for plan in plans {
        if previous == Some(Stage::SpatialOnly) && plan.stage != Stage::SpatialOnly {
            let cfg = model.config.clone();
            model
                .params
                .reinit_group(&cfg, ParamGroup::TemporalAttn, plan.seed ^ 0x7e3a_11d5)?;
        }
        curves.push(train_stage(model, dataset, s, plan)?);
        previous = Some(plan.stage);
    }
    Ok(curves)
}

/// Split clips into `(observed, future)` along the frame axis.
pub fn split_clip(clip: &LatentClip, observed: usize) -> (LatentClip, LatentClip) {
    let (a, b) = clip.view().split_at(Axis(0), observed);
    (a.to_owned(), b.to_owned())
}

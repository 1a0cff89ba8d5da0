//! Run configuration and the end-to-end pipeline driven by the command line.
//!
//! A [`RunConfig`] is one JSON document. Every output directory receives the
//! resolved copy (`config.json`) so a run can be repeated from it.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Axis};
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionInput;
use crate::data::io::{read_vclip, write_atomic};
use crate::data::tokenizer::{to_latent, to_pixels};
use crate::data::{gen_bouncing_balls, BallConfig, DatasetConfig, Tokenizer};
use crate::error::{Result, VdtError};
use crate::eval::{collision_probe, MetricReport, ProbeConfig};
use crate::model::{CondScheme, Vdt, VdtConfig};
use crate::sampler::{sample, SamplerConfig};
use crate::schedule::{DiffusionSchedule, ScheduleConfig, ScheduleKind};
use crate::training::{run_training_from, split_clip, LossCurve, LrSchedule, Stage, TrainPlan};
use crate::{LatentClip, VideoClip};

/// Where clips come from. Exactly one of `generate` and `path` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<DatasetConfig>,
    /// Directory of `.vclip` files, read in file-name order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tokenizer: Tokenizer,
    /// Number of trailing clips kept out of training for evaluation.
    #[serde(default)]
    pub holdout: usize,
}

/// Pixel clips split into training and held-out parts.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<VideoClip>,
    pub test: Vec<VideoClip>,
    /// Collision labels of the held-out clips, when the generator has them.
    pub test_labels: Option<Vec<bool>>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.generate, &self.path) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(VdtError::InvalidConfig(
                "data: set exactly one of `generate` and `path`".into(),
            )),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        self.validate()?;
        let (clips, labels) = match (&self.generate, &self.path) {
            (Some(DatasetConfig::BouncingBalls(c)), _) => {
                let ds = gen_bouncing_balls(c, self.seed)?;
                (ds.videos(), Some(ds.labels()))
            }
            (Some(other), _) => (other.generate(self.seed)?, None),
            (None, Some(dir)) => (read_clip_dir(dir)?, None),
            (None, None) => unreachable!("validated"),
        };
        if self.holdout >= clips.len() {
            return Err(VdtError::InvalidConfig(format!(
                "data: holdout {} leaves no training clips out of {}",
                self.holdout,
                clips.len()
            )));
        }
        let cut = clips.len() - self.holdout;
        let mut train = clips;
        let test = train.split_off(cut);
        Ok(Dataset {
            train,
            test,
            test_labels: labels.map(|l| l[cut..].to_vec()),
        })
    }

    /// Generated clip shape `(frames, height, width, channels)`, if known
    /// without reading files.
    fn generated_shape(&self) -> Option<(usize, usize, usize, usize)> {
        match self.generate.as_ref()? {
            DatasetConfig::BouncingBalls(c) => Some((c.frames, c.height, c.width, 3)),
            DatasetConfig::MovingShapes(c) => Some((c.frames, c.height, c.width, 3)),
        }
    }
}

/// All `.vclip` files of a directory, sorted by file name.
pub fn read_clip_dir(dir: &Path) -> Result<Vec<VideoClip>> {
    if !dir.is_dir() {
        return Err(VdtError::InvalidConfig(format!(
            "data: dataset path `{}` is not a directory",
            dir.display()
        )));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "vclip"));
    paths.sort();
    if paths.is_empty() {
        return Err(VdtError::InvalidConfig(format!(
            "data: no .vclip files in `{}`",
            dir.display()
        )));
    }
    paths.iter().map(|p| Ok(read_vclip(p)?.to_f64())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: VdtConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: Vec<TrainPlan>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Parameter initialisation seed.
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Parse and validate. Parse errors carry serde's line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| VdtError::InvalidConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            VdtError::InvalidConfig(format!("cannot read config `{}`: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Write the resolved config as `config.json` inside `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("config.json"), self.to_json()?.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        DiffusionSchedule::new(&self.schedule)?;
        self.data.validate()?;
        if let Some(steps) = self.sampler.steps {
            if steps != self.schedule.steps {
                return Err(VdtError::InvalidConfig(format!(
                    "sampler.steps {steps} differs from schedule.T {}",
                    self.schedule.steps
                )));
            }
        }
        for (i, plan) in self.train.iter().enumerate() {
            if plan.cond_scheme != self.model.cond_scheme {
                return Err(VdtError::InvalidConfig(format!(
                    "train[{i}].cond_scheme `{}` differs from model.cond_scheme `{}`",
                    plan.cond_scheme.as_str(),
                    self.model.cond_scheme.as_str()
                )));
            }
        }
        if let Some((f, h, w, c)) = self.data.generated_shape() {
            let (lh, lw, lc) = self.data.tokenizer.latent_dims(h, w, c)?;
            let m = &self.model;
            if (lh, lw, lc) != (m.latent_h, m.latent_w, m.latent_c) {
                return Err(VdtError::InvalidConfig(format!(
                    "data latents are {lh}x{lw}x{lc} but the model expects {}x{}x{}",
                    m.latent_h, m.latent_w, m.latent_c
                )));
            }
            if f < m.cond_frames + m.frames {
                return Err(VdtError::InvalidConfig(format!(
                    "clips have {f} frames, the model needs {} conditional + {} predicted",
                    m.cond_frames, m.frames
                )));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(&self.schedule)
    }

    /// Bouncing-ball future prediction: two observed frames, four predicted,
    /// 16x16 RGB, identity tokenizer, 200 diffusion steps, concatenated
    /// conditional tokens, spatial pretraining followed by joint training.
    pub fn bouncing_ball_prediction() -> Self {
        let scheme = CondScheme::Concat;
        let plan = |stage, steps, seed| TrainPlan {
            stage,
            steps,
            lr: 2e-3,
            batch: 8,
            cond_scheme: scheme,
            seed,
            weight_decay: 0.0,
            lr_schedule: LrSchedule::Cosine,
        };
        Self {
            model: VdtConfig {
                layers: 2,
                hidden: 32,
                heads: 4,
                mlp_ratio: 4,
                patch: 2,
                frames: 4,
                latent_h: 16,
                latent_w: 16,
                latent_c: 3,
                cond_frames: 2,
                cond_scheme: scheme,
            },
            schedule: ScheduleConfig {
                steps: 200,
                beta_start: 2.5e-4,
                beta_end: 0.05,
                kind: ScheduleKind::Linear,
            },
            data: DataConfig {
                generate: Some(DatasetConfig::BouncingBalls(BallConfig {
                    clips: 528,
                    max_speed: 0.75,
                    ..BallConfig::default()
                })),
                path: None,
                seed: 1,
                tokenizer: Tokenizer::Identity,
                holdout: 16,
            },
            train: vec![
                plan(Stage::SpatialOnly, 2000, 11),
                plan(Stage::Joint, 14000, 12),
            ],
            sampler: SamplerConfig {
                clip_x0: Some(1.0),
                noise_scale: Some(0.5),
                ..SamplerConfig::default()
            },
            out: None,
            seed: 0,
        }
    }
}

pub fn encode_all(tok: &Tokenizer, clips: &[VideoClip]) -> Result<Vec<LatentClip>> {
    clips.iter().map(|c| to_latent(tok, c)).collect()
}

/// Build (or continue) a model and run every plan of the config.
/// `previous` is the stage that produced `init`, which decides whether the
/// temporal attention is re-initialised before the first plan.
pub fn train_model(
    cfg: &RunConfig,
    data: &Dataset,
    init: Option<Vdt>,
    previous: Option<Stage>,
) -> Result<(Vdt, Vec<LossCurve>)> {
    let mut model = match init {
        Some(m) => {
            if m.config != cfg.model {
                return Err(VdtError::InvalidConfig(
                    "checkpoint config differs from the run config's model".into(),
                ));
            }
            m
        }
        None => Vdt::new(cfg.model.clone(), cfg.seed)?,
    };
    let latents = encode_all(&cfg.data.tokenizer, &data.train)?;
    let curves = run_training_from(&mut model, &cfg.train, &latents, &cfg.schedule()?, previous)?;
    Ok((model, curves))
}

/// Sample the `frames` future frames of each clip from its first `observed`
/// frames. Clip `i` uses sampler seed `cfg.seed + i`. Returns pixel futures.
pub fn predict_futures(
    model: &Vdt,
    s: &DiffusionSchedule,
    sampler: &SamplerConfig,
    tok: &Tokenizer,
    clips: &[VideoClip],
    observed: usize,
    frames: usize,
) -> Result<Vec<VideoClip>> {
    clips
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let z = to_latent(tok, clip)?;
            if z.dim().0 < observed {
                return Err(VdtError::InvalidInput(format!(
                    "clip {i} has {} frames, {observed} are needed as context",
                    z.dim().0
                )));
            }
            let cond = ConditionInput::new(z.slice(s![..observed, .., .., ..]).to_owned())?;
            let (_, h, w, c) = z.dim();
            let cfg = SamplerConfig {
                seed: sampler.seed.wrapping_add(i as u64),
                ..sampler.clone()
            };
            Ok(to_pixels(
                tok,
                &sample(model, s, &cfg, (frames, h, w, c), Some(&cond))?,
            ))
        })
        .collect()
}

/// Prediction metrics on held-out clips: the model sees the first
/// `cond_frames` frames and is scored on the next `frames`. With collision
/// labels covering both classes, the probe is trained on predicted and on
/// true futures.
pub fn evaluate_prediction(
    model: &Vdt,
    cfg: &RunConfig,
    clips: &[VideoClip],
    labels: Option<&[bool]>,
) -> Result<(MetricReport, Vec<VideoClip>)> {
    let k = model.config.cond_frames;
    let f = model.config.frames;
    let preds = predict_futures(
        model,
        &cfg.schedule()?,
        &cfg.sampler,
        &cfg.data.tokenizer,
        clips,
        k,
        f,
    )?;
    let truths: Vec<VideoClip> = clips
        .iter()
        .map(|c| c.slice(s![k..k + f, .., .., ..]).to_owned())
        .collect();
    let mut report = MetricReport::compare(&preds, &truths)?;
    if let Some(labels) = labels {
        let observed: Vec<VideoClip> = clips.iter().map(|c| split_clip(c, k).0).collect();
        let probe = ProbeConfig {
            seed: cfg.seed,
            ..ProbeConfig::default()
        };
        let positives = labels.iter().filter(|&&l| l).count();
        // the probe needs a few examples of each class to split
        if positives.min(labels.len() - positives) >= 2 {
            report.probe_accuracy =
                Some(collision_probe(&observed, &preds, labels, &probe)?.accuracy);
            report.probe_upper_bound =
                Some(collision_probe(&observed, &truths, labels, &probe)?.accuracy);
        }
    }
    Ok((report, preds))
}

/// Observed frames followed by predictions, for export.
pub fn join_prediction(clip: &VideoClip, observed: usize, future: &VideoClip) -> VideoClip {
    concatenate(
        Axis(0),
        &[clip.slice(s![..observed, .., .., ..]), future.view()],
    )
    .expect("frame shapes agree")
}

/// Loss curves of several schemes trained under one budget.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchemeComparison {
    pub schemes: Vec<CondScheme>,
    pub seeds: Vec<u64>,
    /// `curves[seed][scheme]`, every stage concatenated.
    pub curves: Vec<Vec<Vec<f64>>>,
    /// Tail mean over the last `window` steps, `final_loss[seed][scheme]`.
    pub final_loss: Vec<Vec<f64>>,
    pub window: usize,
}

impl SchemeComparison {
    /// `step,<scheme>,...` for one seed, one row per step.
    pub fn to_csv(&self, seed_index: usize) -> String {
        let mut out = String::from("step");
        for s in &self.schemes {
            out.push(',');
            out.push_str(s.as_str());
        }
        out.push('\n');
        let rows = self.curves[seed_index]
            .iter()
            .map(Vec::len)
            .min()
            .unwrap_or(0);
        for step in 0..rows {
            out.push_str(&(step + 1).to_string());
            for curve in &self.curves[seed_index] {
                out.push_str(&format!(",{:.8e}", curve[step]));
            }
            out.push('\n');
        }
        out
    }

    /// Index of the lowest final loss per seed.
    pub fn winners(&self) -> Vec<CondScheme> {
        self.final_loss
            .iter()
            .map(|row| {
                let best = row
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .expect("at least one scheme");
                self.schemes[best]
            })
            .collect()
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<8}", "seed");
        for s in &self.schemes {
            out.push_str(&format!("{:>12}", s.as_str()));
        }
        out.push_str(&format!("{:>10}\n", "lowest"));
        for ((seed, row), win) in self.seeds.iter().zip(&self.final_loss).zip(self.winners()) {
            out.push_str(&format!("{seed:<8}"));
            for v in row {
                out.push_str(&format!("{v:>12.5}"));
            }
            out.push_str(&format!("{:>10}\n", win.as_str()));
        }
        out
    }
}

/// Train one model per scheme and seed under the plans of `cfg`, changing
/// only the conditioning scheme. Seed `s` drives both initialisation and the
/// training streams, so all schemes of one seed see the same batches.
pub fn compare_schemes(
    cfg: &RunConfig,
    data: &Dataset,
    schemes: &[CondScheme],
    seeds: &[u64],
    window: usize,
) -> Result<SchemeComparison> {
    let latents = encode_all(&cfg.data.tokenizer, &data.train)?;
    let s = cfg.schedule()?;
    let mut curves = Vec::with_capacity(seeds.len());
    let mut final_loss = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut per_scheme = Vec::with_capacity(schemes.len());
        let mut finals = Vec::with_capacity(schemes.len());
        for &scheme in schemes {
            let model_cfg = VdtConfig {
                cond_scheme: scheme,
                ..cfg.model.clone()
            };
            let plans: Vec<TrainPlan> = cfg
                .train
                .iter()
                .enumerate()
                .map(|(i, p)| TrainPlan {
                    cond_scheme: scheme,
                    seed: p.seed
                        ^ seed
                            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                            .wrapping_add(i as u64),
                    ..p.clone()
                })
                .collect();
            let mut model = Vdt::new(model_cfg, seed)?;
            let stage_curves = run_training_from(&mut model, &plans, &latents, &s, None)?;
            let all: Vec<f64> = stage_curves
                .iter()
                .flat_map(|c| c.losses.iter().copied())
                .collect();
            let last = stage_curves
                .last()
                .map(|c| c.tail_mean(window))
                .unwrap_or(f64::NAN);
            per_scheme.push(all);
            finals.push(last);
        }
        curves.push(per_scheme);
        final_loss.push(finals);
    }
    Ok(SchemeComparison {
        schemes: schemes.to_vec(),
        seeds: seeds.to_vec(),
        curves,
        final_loss,
        window,
    })
}

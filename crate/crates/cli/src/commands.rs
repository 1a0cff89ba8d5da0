use std::fs;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use vdt_core::data::io::{export_frames, read_vclip, write_atomic, write_vclip, ClipData};
use vdt_core::data::tokenizer::to_pixels;
use vdt_core::data::{
    gen_bouncing_balls, gen_moving_shapes, BallConfig, DatasetConfig, ShapeConfig,
};
use vdt_core::eval::MetricReport;
use vdt_core::model::{load_checkpoint, save_checkpoint, CondScheme, Vdt};
use vdt_core::run::{
    compare_schemes, evaluate_prediction, join_prediction, predict_futures, read_clip_dir,
    train_model, RunConfig,
};
use vdt_core::sampler::sample_many;
use vdt_core::schedule::{DiffusionSchedule, ScheduleConfig, ScheduleKind};
use vdt_core::training::{Stage, TrainPlan};
use vdt_core::{VdtError, VideoClip};

use crate::{
    CompareArgs, DataKind, EvalArgs, GenDataArgs, PredictArgs, SampleArgs, ScheduleArgs, TrainArgs,
};

const CHECKPOINT: &str = "checkpoint.vdtc";
const STATE: &str = "state.json";

/// Stages already applied to the checkpoint stored beside this file.
#[derive(Debug, Default, Serialize, Deserialize)]
struct TrainState {
    stages: Vec<Stage>,
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    VdtError::InvalidConfig(msg.into()).into()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn read_state(checkpoint: &Path) -> Result<TrainState> {
    let path = checkpoint.with_file_name(STATE);
    if !path.exists() {
        return Ok(TrainState::default());
    }
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

/// Load a checkpoint and insist that it was built from `cfg.model`.
fn load_model(path: &Path, cfg: &RunConfig) -> Result<Vdt> {
    let model = load_checkpoint(path).map_err(|e| match e {
        VdtError::Io(io) => {
            config_error(format!("cannot read checkpoint `{}`: {io}", path.display()))
        }
        other => other.into(),
    })?;
    if model.config != cfg.model {
        return Err(config_error(format!(
            "checkpoint `{}` was built for a different model config",
            path.display()
        )));
    }
    Ok(model)
}

fn write_clip(out: &Path, name: &str, clip: &VideoClip) -> Result<()> {
    write_vclip(
        out.join(format!("{name}.vclip")),
        &ClipData::from_video(clip),
    )?;
    export_frames(clip, out.join(name))?;
    Ok(())
}

fn report_metrics(out: &Path, report: &MetricReport) -> Result<()> {
    write_json(&out.join("metrics.json"), report)?;
    let table = report.to_table();
    write_atomic(&out.join("metrics.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(cond) = a.cond {
        let scheme: CondScheme = cond.into();
        cfg.model.cond_scheme = scheme;
        if !scheme.is_conditional() {
            cfg.model.cond_frames = 0;
        }
        for p in &mut cfg.train {
            p.cond_scheme = scheme;
        }
    }
    if let Some(stage) = a.stage {
        let stage: Stage = stage.into();
        let template = cfg
            .train
            .iter()
            .find(|p| p.stage == stage)
            .or(cfg.train.first())
            .cloned()
            .ok_or_else(|| config_error("train: the config has no plans"))?;
        cfg.train = vec![TrainPlan { stage, ..template }];
    }
    if cfg.train.is_empty() {
        return Err(config_error("train: the config has no plans"));
    }
    for (i, p) in cfg.train.iter_mut().enumerate() {
        p.steps = a.steps.unwrap_or(p.steps);
        p.lr = a.lr.unwrap_or(p.lr);
        p.batch = a.batch.unwrap_or(p.batch);
        p.seed = a.seed.wrapping_add(1 + i as u64);
    }
    cfg.seed = a.seed;
    cfg.out = Some(a.out.clone());
    cfg.validate()?;

    // everything that can fail on bad input happens before the first write
    let (init, mut state) = match &a.init {
        Some(path) => (Some(load_model(path, &cfg)?), read_state(path)?),
        None => (None, TrainState::default()),
    };
    let data = cfg.data.load()?;
    let (model, curves) = train_model(&cfg, &data, init, state.stages.last().copied())?;

    cfg.write_resolved(&a.out)?;
    save_checkpoint(a.out.join(CHECKPOINT), &model)?;
    for (i, (curve, plan)) in curves.iter().zip(&cfg.train).enumerate() {
        curve.write_csv(a.out.join(format!("loss_{i}_{}.csv", plan.stage.as_str())))?;
        println!(
            "{:<14} steps {:>6}  first {:.5}  last {:.5}",
            plan.stage.as_str(),
            curve.losses.len(),
            curve.head_mean(10),
            curve.tail_mean(10)
        );
    }
    state.stages.extend(cfg.train.iter().map(|p| p.stage));
    write_json(&a.out.join(STATE), &state)?;
    println!("checkpoint written to {}", a.out.join(CHECKPOINT).display());
    Ok(())
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.sampler.seed = seed;
    }
    let model = load_model(&a.checkpoint, &cfg)?;
    let s = cfg.schedule()?;
    let m = &model.config;
    let samples: Vec<VideoClip> = if m.cond_scheme.is_conditional() {
        let path = a
            .cond_clip
            .as_ref()
            .ok_or_else(|| config_error("sample: a conditional model needs --cond-clip"))?;
        let clip = read_vclip(path)?.to_f64();
        let clips = vec![clip; a.n];
        predict_futures(
            &model,
            &s,
            &cfg.sampler,
            &cfg.data.tokenizer,
            &clips,
            m.cond_frames,
            m.frames,
        )?
    } else {
        if a.cond_clip.is_some() {
            return Err(config_error(
                "sample: the model is unconditional, drop --cond-clip",
            ));
        }
        let shape = (m.frames, m.latent_h, m.latent_w, m.latent_c);
        sample_many(&model, &s, &cfg.sampler, shape, None, a.n)?
            .iter()
            .map(|z| to_pixels(&cfg.data.tokenizer, z))
            .collect()
    };
    cfg.write_resolved(&a.out)?;
    for (i, clip) in samples.iter().enumerate() {
        write_clip(&a.out, &format!("sample_{i:03}"), clip)?;
    }
    println!("{} samples written to {}", samples.len(), a.out.display());
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.sampler.seed = seed;
    }
    let model = load_model(&a.checkpoint, &cfg)?;
    let m = &model.config;
    if !m.cond_scheme.is_conditional() {
        return Err(config_error(
            "predict: the model has no conditioning scheme",
        ));
    }
    let k = a.observed.unwrap_or(m.cond_frames);
    if k == 0 {
        return Err(config_error("predict: --observed must be at least 1"));
    }
    let (clips, names): (Vec<VideoClip>, Vec<String>) = match &a.cond_clip {
        Some(path) => (vec![read_vclip(path)?.to_f64()], vec!["prediction".into()]),
        None => {
            let test = cfg.data.load()?.test;
            if test.is_empty() {
                return Err(config_error(
                    "predict: data.holdout is 0 and no --cond-clip was given",
                ));
            }
            let names = (0..test.len())
                .map(|i| format!("prediction_{i:03}"))
                .collect();
            (test, names)
        }
    };
    let preds = predict_futures(
        &model,
        &cfg.schedule()?,
        &cfg.sampler,
        &cfg.data.tokenizer,
        &clips,
        k,
        m.frames,
    )?;
    cfg.write_resolved(&a.out)?;
    for ((clip, pred), name) in clips.iter().zip(&preds).zip(&names) {
        write_clip(&a.out, name, &join_prediction(clip, k, pred))?;
    }
    println!(
        "{} predictions of {} frames from {k} observed",
        preds.len(),
        m.frames
    );
    // score whatever has ground truth for every predicted frame
    let (p, t): (Vec<VideoClip>, Vec<VideoClip>) = clips
        .iter()
        .zip(&preds)
        .filter(|(c, _)| c.dim().0 >= k + m.frames)
        .map(|(c, p)| {
            (
                p.clone(),
                c.slice(ndarray::s![k..k + m.frames, .., .., ..]).to_owned(),
            )
        })
        .unzip();
    if !p.is_empty() {
        report_metrics(&a.out, &MetricReport::compare(&p, &t)?)?;
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let report = match (&a.pred, &a.truth, &a.config) {
        (Some(pred), Some(truth), _) => {
            let p = read_clip_dir(pred)?;
            let t = read_clip_dir(truth)?;
            if p.len() != t.len() {
                return Err(config_error(format!(
                    "{} predicted clips but {} references",
                    p.len(),
                    t.len()
                )));
            }
            MetricReport::compare(&p, &t)?
        }
        (_, _, Some(config)) => {
            let cfg = RunConfig::load(config)?;
            let ckpt = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| config_error("eval: --checkpoint is required with --config"))?;
            let model = load_model(ckpt, &cfg)?;
            let data = cfg.data.load()?;
            if data.test.is_empty() {
                return Err(config_error("eval: data.holdout is 0"));
            }
            let (report, _) =
                evaluate_prediction(&model, &cfg, &data.test, data.test_labels.as_deref())?;
            cfg.write_resolved(&a.out)?;
            report
        }
        _ => {
            return Err(config_error(
                "eval: give --config and --checkpoint, or --pred and --truth",
            ))
        }
    };
    fs::create_dir_all(&a.out)?;
    report_metrics(&a.out, &report)
}

pub fn compare_cond(a: CompareArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    if cfg.model.cond_frames == 0 {
        return Err(config_error(
            "compare-cond: model.cond_frames must be at least 1",
        ));
    }
    if cfg.train.is_empty() {
        return Err(config_error("compare-cond: the config has no plans"));
    }
    if a.seeds.is_empty() {
        return Err(config_error("compare-cond: no seeds"));
    }
    let data = cfg.data.load()?;
    let cmp = compare_schemes(
        &cfg,
        &data,
        &CondScheme::ALL_CONDITIONAL,
        &a.seeds,
        a.window,
    )?;
    cfg.write_resolved(&a.out)?;
    for (i, seed) in a.seeds.iter().enumerate() {
        write_atomic(
            &a.out.join(format!("loss_seed{seed}.csv")),
            cmp.to_csv(i).as_bytes(),
        )?;
    }
    let table = cmp.summary_table();
    write_atomic(&a.out.join("summary.txt"), table.as_bytes())?;
    write_json(&a.out.join("summary.json"), &cmp.final_loss)?;
    print!("{table}");
    Ok(())
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let (mut dataset, mut seed) = match (&a.config, a.kind) {
        (Some(path), _) => {
            let cfg = RunConfig::load(path)?;
            let gen = cfg
                .data
                .generate
                .ok_or_else(|| config_error("gen-data: the config reads clips from a path"))?;
            (gen, cfg.data.seed)
        }
        (None, Some(DataKind::MovingShapes)) => {
            (DatasetConfig::MovingShapes(ShapeConfig::default()), 0)
        }
        (None, _) => (DatasetConfig::BouncingBalls(BallConfig::default()), 0),
    };
    seed = a.seed.unwrap_or(seed);
    match &mut dataset {
        DatasetConfig::BouncingBalls(c) => {
            c.clips = a.clips.unwrap_or(c.clips);
            c.frames = a.frames.unwrap_or(c.frames);
            if let Some(size) = a.size {
                // balls and their speed keep their size relative to the frame
                let k = size as f64 / c.height.min(c.width) as f64;
                c.radius *= k;
                c.max_speed *= k;
                c.height = size;
                c.width = size;
            }
        }
        DatasetConfig::MovingShapes(c) => {
            c.clips = a.clips.unwrap_or(c.clips);
            c.frames = a.frames.unwrap_or(c.frames);
            c.height = a.size.unwrap_or(c.height);
            c.width = a.size.unwrap_or(c.width);
        }
    }
    let (clips, labels) = match &dataset {
        DatasetConfig::BouncingBalls(c) => {
            let ds = gen_bouncing_balls(c, seed)?;
            (ds.videos(), Some(ds.labels()))
        }
        DatasetConfig::MovingShapes(c) => (
            gen_moving_shapes(c, seed)?
                .into_iter()
                .map(|c| c.video)
                .collect(),
            None,
        ),
    };
    fs::create_dir_all(&a.out)?;
    #[derive(Serialize)]
    struct Manifest<'a> {
        generate: &'a DatasetConfig,
        seed: u64,
    }
    write_json(
        &a.out.join("dataset.json"),
        &Manifest {
            generate: &dataset,
            seed,
        },
    )?;
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip_{i:04}");
        write_vclip(
            a.out.join(format!("{name}.vclip")),
            &ClipData::from_video(clip),
        )?;
        if a.ppm {
            export_frames(clip, a.out.join(&name))?;
        }
    }
    if let Some(labels) = labels {
        let mut csv = String::from("clip,collision\n");
        for (i, l) in labels.iter().enumerate() {
            csv.push_str(&format!("{i},{}\n", u8::from(*l)));
        }
        write_atomic(&a.out.join("labels.csv"), csv.as_bytes())?;
    }
    println!("{} clips written to {}", clips.len(), a.out.display());
    Ok(())
}

pub fn inspect_schedule(a: ScheduleArgs) -> Result<()> {
    let sc = match &a.config {
        Some(path) => RunConfig::load(path)?.schedule,
        None => {
            let d = ScheduleConfig::default();
            ScheduleConfig {
                steps: a.steps.unwrap_or(d.steps),
                beta_start: a.beta_start.unwrap_or(d.beta_start),
                beta_end: a.beta_end.unwrap_or(d.beta_end),
                kind: ScheduleKind::Linear,
            }
        }
    };
    let s = DiffusionSchedule::new(&sc)?;
    let t_max = s.steps();
    println!(
        "T = {t_max}, beta {:.3e} .. {:.3e}",
        sc.beta_start, sc.beta_end
    );
    println!(
        "{:>6} {:>12} {:>12} {:>14} {:>12}",
        "t", "beta", "alpha_bar", "sqrt(1-ab)", "post_var"
    );
    let mut shown: Vec<usize> = (0..=10).map(|i| (i * t_max / 10).max(1)).collect();
    shown.dedup();
    for t in shown {
        println!(
            "{t:>6} {:>12.4e} {:>12.4e} {:>14.6} {:>12.4e}",
            s.beta(t),
            s.alpha_bar(t),
            (1.0 - s.alpha_bar(t)).sqrt(),
            s.posterior_var(t)
        );
    }
    if let Some(out) = &a.out {
        let mut csv = String::from("t,beta,alpha,alpha_bar,posterior_var\n");
        for t in 1..=t_max {
            csv.push_str(&format!(
                "{t},{:e},{:e},{:e},{:e}\n",
                s.beta(t),
                s.alpha(t),
                s.alpha_bar(t),
                s.posterior_var(t)
            ));
        }
        if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_atomic(out, csv.as_bytes())?;
    }
    Ok(())
}

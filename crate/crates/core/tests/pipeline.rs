use vdt_core::data::{BallConfig, DatasetConfig, Tokenizer};
use vdt_core::model::{checkpoint_bytes, checkpoint_from_bytes, CondScheme, VdtConfig};
use vdt_core::run::{evaluate_prediction, train_model, DataConfig, RunConfig};
use vdt_core::sampler::SamplerConfig;
use vdt_core::schedule::{ScheduleConfig, ScheduleKind};
use vdt_core::training::{LrSchedule, Stage, TrainPlan};

fn config() -> RunConfig {
    let plan = |stage, seed| TrainPlan {
        stage,
        steps: 10,
        lr: 2e-3,
        batch: 4,
        cond_scheme: CondScheme::Concat,
        seed,
        weight_decay: 0.0,
        lr_schedule: LrSchedule::Cosine,
    };
    RunConfig {
        model: VdtConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            mlp_ratio: 2,
            patch: 2,
            frames: 2,
            latent_h: 8,
            latent_w: 8,
            latent_c: 3,
            cond_frames: 2,
            cond_scheme: CondScheme::Concat,
        },
        schedule: ScheduleConfig {
            steps: 20,
            beta_start: 1e-3,
            beta_end: 0.2,
            kind: ScheduleKind::Linear,
        },
        data: DataConfig {
            generate: Some(DatasetConfig::BouncingBalls(BallConfig {
                clips: 12,
                frames: 4,
                height: 8,
                width: 8,
                radius: 1.5,
                max_speed: 1.0,
                ..BallConfig::default()
            })),
            path: None,
            seed: 5,
            tokenizer: Tokenizer::Identity,
            holdout: 3,
        },
        train: vec![plan(Stage::SpatialOnly, 1), plan(Stage::TemporalOnly, 2)],
        sampler: SamplerConfig {
            clip_x0: Some(1.0),
            ..SamplerConfig::default()
        },
        out: None,
        seed: 4,
    }
}

#[test]
fn reloaded_checkpoint_predicts_identically_to_another_reload() {
    let cfg = config();
    let data = cfg.data.load().unwrap();
    let (model, curves) = train_model(&cfg, &data, None, None).unwrap();
    assert_eq!(curves.len(), 2);
    assert!(curves
        .iter()
        .all(|c| c.losses.len() == 10 && c.losses.iter().all(|l| l.is_finite())));

    let bytes = checkpoint_bytes(&model).unwrap();
    let a = checkpoint_from_bytes(&bytes).unwrap();
    let b = checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint_bytes(&a).unwrap(), bytes);
    let (ra, pa) = evaluate_prediction(&a, &cfg, &data.test, None).unwrap();
    let (rb, pb) = evaluate_prediction(&b, &cfg, &data.test, None).unwrap();
    assert_eq!(pa, pb);
    assert_eq!(ra.ssim, rb.ssim);
    assert_eq!(pa.len(), 3);
    assert!(pa
        .iter()
        .all(|p| p.dim() == (2, 8, 8, 3) && p.iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn json_config_round_trip_reproduces_training() {
    let cfg = config();
    let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(back, cfg);
    let data = cfg.data.load().unwrap();
    let (m1, c1) = train_model(&cfg, &data, None, None).unwrap();
    let (m2, c2) = train_model(&back, &back.data.load().unwrap(), None, None).unwrap();
    assert_eq!(c1, c2);
    assert_eq!(
        checkpoint_bytes(&m1).unwrap(),
        checkpoint_bytes(&m2).unwrap()
    );
}

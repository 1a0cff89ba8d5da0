//! Ancestral DDPM sampling.

use ndarray::{concatenate, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionInput;
use crate::error::{Result, VdtError};
use crate::model::{ForwardOptions, Vdt};
use crate::schedule::{check_same_shape, DiffusionSchedule};
use crate::LatentClip;

/// Variance of each reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceChoice {
    Beta,
    #[default]
    BetaTilde,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(default)]
    pub variance: VarianceChoice,
    #[serde(default)]
    pub seed: u64,
    /// Must equal the schedule length when given.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Clamp the implied `x0_hat` to `[-c, c]` and take the posterior mean
    /// from the clamped estimate. `None` uses the plain noise-form mean.
    #[serde(default)]
    pub clip_x0: Option<f64>,
    /// Multiplies the injected noise at every reverse step. Values below 1
    /// trade sample diversity for cleaner frames. `None` means 1.
    #[serde(default)]
    pub noise_scale: Option<f64>,
}

/// Anything that predicts the noise in `x_t`.
pub trait NoiseModel: Sync {
    fn predict_eps(
        &self,
        xt: &LatentClip,
        t: usize,
        cond: Option<&ConditionInput>,
    ) -> Result<LatentClip>;

    fn check_cond(&self, _cond: Option<&ConditionInput>) -> Result<()> {
        Ok(())
    }
}

impl NoiseModel for Vdt {
    fn predict_eps(
        &self,
        xt: &LatentClip,
        t: usize,
        cond: Option<&ConditionInput>,
    ) -> Result<LatentClip> {
        self.forward(xt, t, cond, ForwardOptions::default())
    }

    fn check_cond(&self, cond: Option<&ConditionInput>) -> Result<()> {
        Vdt::check_cond(self, cond)
    }
}

impl<F> NoiseModel for F
where
    F: Fn(&LatentClip, usize, Option<&ConditionInput>) -> Result<LatentClip> + Sync,
{
    fn predict_eps(
        &self,
        xt: &LatentClip,
        t: usize,
        cond: Option<&ConditionInput>,
    ) -> Result<LatentClip> {
        self(xt, t, cond)
    }
}

/// `x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`.
pub fn predict_x0(
    s: &DiffusionSchedule,
    xt: &LatentClip,
    eps: &LatentClip,
    t: usize,
) -> Result<LatentClip> {
    check_same_shape(xt, eps)?;
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(xt).and(eps).map_collect(|&x, &e| (x - b * e) / a))
}

/// One reverse step `x_t -> x_{t-1}`. `noise` is ignored at `t == 1`.
pub fn denoise_step(
    model_eps: &LatentClip,
    xt: &LatentClip,
    t: usize,
    s: &DiffusionSchedule,
    cfg: &SamplerConfig,
    noise: &LatentClip,
) -> Result<LatentClip> {
    check_same_shape(xt, model_eps)?;
    check_same_shape(xt, noise)?;
    s.check_t(t)?;
    let beta = s.beta(t);
    let scale = cfg.noise_scale.unwrap_or(1.0);
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(VdtError::InvalidConfig(format!(
            "noise_scale must be finite and non-negative, got {scale}"
        )));
    }
    let sd = if t == 1 {
        0.0
    } else {
        scale
            * match cfg.variance {
                VarianceChoice::Beta => beta.sqrt(),
                VarianceChoice::BetaTilde => s.posterior_var(t).sqrt(),
            }
    };
    if let Some(c) = cfg.clip_x0 {
        if !(c > 0.0) {
            return Err(VdtError::InvalidConfig(format!(
                "clip_x0 must be positive, got {c}"
            )));
        }
        let ab = s.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (c0, ct) = s.posterior_coefficients(t)?;
        let ct = if t == 1 { 0.0 } else { ct };
        let c0 = if t == 1 { 1.0 } else { c0 };
        return Ok(Zip::from(xt)
            .and(model_eps)
            .and(noise)
            .map_collect(|&x, &e, &z| {
                let x0 = ((x - b * e) / a).clamp(-c, c);
                c0 * x0 + ct * x + sd * z
            }));
    }
    let coef = beta / (1.0 - s.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / s.alpha(t).sqrt();
    Ok(Zip::from(xt)
        .and(model_eps)
        .and(noise)
        .map_collect(|&x, &e, &z| inv_sqrt_alpha * (x - coef * e) + sd * z))
}

fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> LatentClip {
    LatentClip::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

fn check_sampler(s: &DiffusionSchedule, cfg: &SamplerConfig) -> Result<()> {
    match cfg.steps {
        Some(n) if n != s.steps() => Err(VdtError::InvalidConfig(format!(
            "sampler steps {n} differ from schedule length {}",
            s.steps()
        ))),
        _ => Ok(()),
    }
}

fn run_chain<M: NoiseModel + ?Sized>(
    model: &M,
    s: &DiffusionSchedule,
    cfg: &SamplerConfig,
    shape: (usize, usize, usize, usize),
    cond: Option<&ConditionInput>,
    mut rng: ChaCha8Rng,
) -> Result<LatentClip> {
    let mut x = randn(&mut rng, shape);
    let zero = LatentClip::zeros(shape);
    for t in (1..=s.steps()).rev() {
        let eps = model.predict_eps(&x, t, cond)?;
        let noise = if t > 1 {
            randn(&mut rng, shape)
        } else {
            zero.clone()
        };
        x = denoise_step(&eps, &x, t, s, cfg, &noise)?;
    }
    Ok(x)
}

/// Draw one clip of `shape = (F, H, W, C)` from `x_T ~ N(0, I)`. Conditional
/// frames are passed clean to every step and never enter the chain state.
pub fn sample<M: NoiseModel + ?Sized>(
    model: &M,
    s: &DiffusionSchedule,
    cfg: &SamplerConfig,
    shape: (usize, usize, usize, usize),
    cond: Option<&ConditionInput>,
) -> Result<LatentClip> {
    check_sampler(s, cfg)?;
    model.check_cond(cond)?;
    run_chain(
        model,
        s,
        cfg,
        shape,
        cond,
        ChaCha8Rng::seed_from_u64(cfg.seed),
    )
}

/// `n` independent chains; chain `i` uses stream `i` of the seeded generator,
/// so chain 0 equals [`sample`].
pub fn sample_many<M: NoiseModel + ?Sized>(
    model: &M,
    s: &DiffusionSchedule,
    cfg: &SamplerConfig,
    shape: (usize, usize, usize, usize),
    cond: Option<&ConditionInput>,
    n: usize,
) -> Result<Vec<LatentClip>> {
    check_sampler(s, cfg)?;
    model.check_cond(cond)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            run_chain(model, s, cfg, shape, cond, rng)
        })
        .collect()
}

/// Predict `frames` future frames and return them after the untouched
/// conditional frames, `(K + frames, H, W, C)`.
pub fn predict_video<M: NoiseModel + ?Sized>(
    model: &M,
    s: &DiffusionSchedule,
    cfg: &SamplerConfig,
    frames: usize,
    cond: &ConditionInput,
) -> Result<LatentClip> {
    let (_, h, w, c) = cond.latent.dim();
    let pred = sample(model, s, cfg, (frames, h, w, c), Some(cond))?;
    Ok(concatenate(Axis(0), &[cond.latent.view(), pred.view()]).expect("matching frame shape"))
}
